//! Cross-module property suite on small random instances.

use std::sync::Arc;

use catbridge::csbm::{batch_loss, BridgeCache, Direction, LossKind, TabularEndpointModel};
use catbridge::dimf::{characterization_check, dimf_init, dimf_run, DimfInit, DimfTarget, Iterate};
use catbridge::eot::{cost_from_reference, plan_optimality_check, sinkhorn_solve, EotProblem};
use catbridge::prob::{CategoricalDistribution, Coupling, MarkovChainProcess, TransitionMatrix};
use catbridge::projections::{markovian_projection, pairwise_joint, reciprocal_projection};
use catbridge::reference::{ReferenceConfig, ReferenceKind, ReferenceProcess};
use catbridge::rng::{component_rng, streams};
use catbridge::space::StateSpace;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Failure, VerifyConfig};
use crate::output::OutDir;
use crate::CommonArgs;

const PROJECTION_TOL: f64 = 1e-10;
const CHARACTERIZATION_TOL: f64 = 1e-6;
const GRADIENT_TOL: f64 = 1e-5;
const OPTIMALITY_TOL: f64 = 1e-9;

#[derive(Debug, Serialize)]
struct Property {
    name: &'static str,
    passed: bool,
    /// Worst deviation seen, in the units of the tolerance.
    worst: f64,
    tolerance: f64,
}

#[derive(Debug, Serialize)]
struct Report<'a> {
    config: &'a VerifyConfig,
    properties: Vec<Property>,
}

fn reference(kind: ReferenceKind, s: usize, d: usize, n: usize, alpha: f64) -> Result<Arc<ReferenceProcess>, Failure> {
    let cfg = ReferenceConfig { kind, alpha, num_categories: s, num_dimensions: d, num_intermediate: n };
    Ok(Arc::new(cfg.build()?))
}

fn random_dist(space: StateSpace, rng: &mut ChaCha8Rng) -> Result<CategoricalDistribution, Failure> {
    let w = Array1::from_shape_fn(space.num_states(), |_| rng.random::<f64>() + 0.05);
    Ok(CategoricalDistribution::from_weights(space, w)?)
}

fn random_coupling(space: StateSpace, rng: &mut ChaCha8Rng) -> Result<Coupling, Failure> {
    let k = space.num_states();
    let w = Array2::from_shape_fn((k, k), |_| rng.random::<f64>() + 0.05);
    Ok(Coupling::from_weights(space, w)?)
}

fn sup<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn pick(rng: &mut ChaCha8Rng) -> (ReferenceKind, f64) {
    if rng.random::<bool>() {
        (ReferenceKind::Uniform, 0.1 + 0.8 * rng.random::<f64>())
    } else {
        (ReferenceKind::Gaussian, 0.3 + rng.random::<f64>())
    }
}

/// The reciprocal projection keeps the coupling; the Markovian projection
/// keeps every time marginal and every neighbouring pair.
fn projections(cfg: &VerifyConfig, rng: &mut ChaCha8Rng) -> Result<f64, Failure> {
    let mut worst: f64 = 0.0;
    for i in 0..cfg.cases {
        let (s, d, n) = [(3, 1, 2), (2, 2, 1), (4, 1, 3)][i % 3];
        let (kind, alpha) = pick(rng);
        let r = reference(kind, s, d, n, alpha)?;
        let pi = random_coupling(r.space(), rng)?;
        let rec = reciprocal_projection(&pi, &r)?;
        worst = worst.max(sup(rec.coupling().probs(), pi.probs()));
        let m = markovian_projection(&rec)?;
        let marginals = m.time_marginals();
        for (t, got) in marginals.iter().enumerate() {
            worst = worst.max(sup(got, &rec.time_marginal(t)?));
        }
        for t in 1..=r.grid().terminal() {
            let chain_pair = Array2::from_shape_fn(m.transition(t).matrix().dim(), |(a, b)| {
                marginals[t - 1][a] * m.transition(t).matrix()[[a, b]]
            });
            worst = worst.max(sup(&chain_pair, &pairwise_joint(&rec, t)?));
        }
    }
    Ok(worst)
}

/// Moves half of one row's mass onto a single state.
fn perturb(m: &MarkovChainProcess) -> Result<MarkovChainProcess, Failure> {
    let mut transitions = m.transitions().to_vec();
    let mut rows = transitions[0].matrix().to_owned();
    let k = rows.ncols();
    for j in 0..k {
        rows[[0, j]] = 0.5 * rows[[0, j]] + if j == k - 1 { 0.5 } else { 0.0 };
    }
    transitions[0] = TransitionMatrix::new(rows)?;
    Ok(MarkovChainProcess::new(m.grid(), m.initial().clone(), transitions)?)
}

/// D-IMF run to its fixed point yields a chain that is Markov, shares the
/// reference bridges and has the prescribed marginals.
fn characterization(cfg: &VerifyConfig, rng: &mut ChaCha8Rng) -> Result<f64, Failure> {
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.cases {
        let (kind, alpha) = pick(rng);
        let r = reference(kind, 4, 1, 2, alpha)?;
        let (p0, p1) = (random_dist(r.space(), rng)?, random_dist(r.space(), rng)?);
        let problem = EotProblem::new(p0.clone(), p1.clone(), cost_from_reference(&r)?)?;
        let plan = sinkhorn_solve(&problem, 200_000, 1e-14)?.plan;
        let target = DimfTarget::from_plan(&plan, &r)?;
        let state = dimf_run(dimf_init(&p0, &p1, &r, DimfInit::Independent)?, &target, 200, 1e-16)?;
        let rec = match &state.iterate {
            Iterate::Reciprocal(rec) => rec.clone(),
            Iterate::Markov(m) => reciprocal_projection(&catbridge::projections::coupling_of_chain(m)?, &r)?,
        };
        let mut chain = markovian_projection(&rec)?;
        if cfg.inject_perturbation {
            chain = perturb(&chain)?;
        }
        let rep = characterization_check(&chain, &r, &p0, &p1)?;
        worst = worst
            .max(rep.markov_residual)
            .max(rep.reciprocal_residual)
            .max(rep.marginal_residuals.0)
            .max(rep.marginal_residuals.1);
    }
    Ok(worst)
}

/// Relative error of the analytic batch gradient against central differences.
fn gradients(cfg: &VerifyConfig, rng: &mut ChaCha8Rng) -> Result<f64, Failure> {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..cfg.cases {
        let (kind, alpha) = pick(rng);
        let r = reference(kind, 3, 1, 2, alpha)?;
        let cache = BridgeCache::new(&r)?;
        let k = r.space().num_states();
        let batch: Vec<(usize, usize)> = (0..8).map(|_| (rng.random_range(0..k), rng.random_range(0..k))).collect();
        for loss in [LossKind::Kl, LossKind::Mse] {
            for direction in [Direction::Forward, Direction::Backward] {
                let len = TabularEndpointModel::uniform(direction, r.space(), r.grid()).logits().len();
                let logits = (0..len).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
                let model = TabularEndpointModel::from_logits(direction, r.space(), r.grid(), logits)?;
                let draws: u64 = rng.random();
                let eval = |m: &TabularEndpointModel| batch_loss(m, &cache, loss, 0.3, &batch, &mut ChaCha8Rng::seed_from_u64(draws));
                let (_, grad) = eval(&model)?;
                let (mut err, mut scale): (f64, f64) = (0.0, 1e-12);
                let mut probe = model.clone();
                for i in 0..len {
                    let base = model.logits()[i];
                    probe.logits_mut()[i] = base + h;
                    let up = eval(&probe)?.0.loss;
                    probe.logits_mut()[i] = base - h;
                    let down = eval(&probe)?.0.loss;
                    probe.logits_mut()[i] = base;
                    let fd = (up - down) / (2.0 * h);
                    err = err.max((fd - grad.get(i, r.num_categories())).abs());
                    scale = scale.max(fd.abs());
                }
                worst = worst.max(err / scale);
            }
        }
    }
    Ok(worst)
}

/// No feasible competitor beats the Sinkhorn plan on the entropic objective.
/// Returns 0 when every check passes and 1 otherwise.
fn sinkhorn_optimality(cfg: &VerifyConfig, rng: &mut ChaCha8Rng) -> Result<f64, Failure> {
    for _ in 0..cfg.cases {
        let (kind, alpha) = pick(rng);
        let r = reference(kind, 4, 1, 2, alpha)?;
        let (p0, p1) = (random_dist(r.space(), rng)?, random_dist(r.space(), rng)?);
        let problem = EotProblem::new(p0, p1, cost_from_reference(&r)?)?;
        let plan = sinkhorn_solve(&problem, 200_000, 1e-13)?.plan;
        if !plan_optimality_check(&plan, &problem, OPTIMALITY_TOL, 4, rng.random())? {
            return Ok(1.0);
        }
    }
    Ok(0.0)
}

pub fn run(cfg: &VerifyConfig, common: &CommonArgs) -> Result<(), Failure> {
    let out = OutDir::create(&common.out)?;
    type Check = fn(&VerifyConfig, &mut ChaCha8Rng) -> Result<f64, Failure>;
    let checks: [(&'static str, Check, f64); 4] = [
        ("projections preserve marginals and pairs", projections, PROJECTION_TOL),
        ("converged process passes the characterization", characterization, CHARACTERIZATION_TOL),
        ("loss gradients match finite differences", gradients, GRADIENT_TOL),
        ("sinkhorn plan is optimal", sinkhorn_optimality, OPTIMALITY_TOL),
    ];
    let mut rng = component_rng(cfg.seed, streams::VERIFY);
    let mut properties = Vec::new();
    for (name, check, tolerance) in checks {
        let worst = check(cfg, &mut rng)?;
        let passed = worst <= tolerance;
        println!("[{}] {name}: worst {worst:.3e} (tol {tolerance:.0e})", if passed { "PASS" } else { "FAIL" });
        properties.push(Property { name, passed, worst, tolerance });
    }
    let failed: Vec<_> = properties.iter().filter(|p| !p.passed).map(|p| p.name).collect();
    out.write_json("verify.json", &Report { config: cfg, properties })?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Property(failed.join("; ")))
    }
}
