//! D-IMF convergence sweep: one history per `(alpha, N)` and a JSON summary.

use std::sync::Arc;

use catbridge::datasets::marginals_linear;
use catbridge::dimf::{dimf_init, dimf_run, write_history_csv, DimfInit, DimfTarget};
use catbridge::eot::{cost_from_reference, sinkhorn_solve, EotProblem};
use catbridge::prob::{CategoricalDistribution, Coupling};
use catbridge::reference::{product_of_factors, ReferenceProcess};
use serde::Serialize;

use crate::config::{ConvergenceConfig, Failure};
use crate::output::{tag, OutDir};
use crate::CommonArgs;

#[derive(Debug, Serialize)]
struct RunSummary {
    alpha: f64,
    #[serde(rename = "N")]
    num_intermediate: usize,
    history: String,
    iterations: usize,
    final_path_kl: f64,
    max_abs_diff_to_plan: f64,
    fixed_point_matches_sinkhorn: bool,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    config: &'a ConvergenceConfig,
    runs: Vec<RunSummary>,
}

/// Uniform `p0` and linearly increasing `p1` in every coordinate.
fn marginals(r: &ReferenceProcess) -> Result<(CategoricalDistribution, CategoricalDistribution), Failure> {
    let space = r.space();
    let (a, b) = marginals_linear(space.num_categories())?;
    if space.num_dimensions() == 1 {
        return Ok((a, b));
    }
    let lift = |p: &CategoricalDistribution| {
        let factors = vec![p.probs().to_owned(); space.num_dimensions()];
        CategoricalDistribution::new(space, product_of_factors(space, &factors))
    };
    Ok((lift(&a)?, lift(&b)?))
}

fn max_abs_diff(a: &Coupling, b: &Coupling) -> f64 {
    a.probs().iter().zip(b.probs().iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn run(cfg: &ConvergenceConfig, common: &CommonArgs) -> Result<(), Failure> {
    let out = OutDir::create(&common.out)?;
    let mut runs = Vec::new();
    for (alpha, n, r) in cfg.references()? {
        let r = Arc::new(r);
        let (p0, p1) = marginals(&r)?;
        let problem = EotProblem::new(p0.clone(), p1.clone(), cost_from_reference(&r)?)?;
        let plan = sinkhorn_solve(&problem, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol)?.plan;
        let target = DimfTarget::from_plan(&plan, &r)?;
        let state = dimf_run(dimf_init(&p0, &p1, &r, DimfInit::Independent)?, &target, cfg.max_iters, cfg.kl_tol)?;

        let name = format!("history_{}_alpha{}_N{n}.csv", cfg.reference.name(), tag(alpha));
        out.write(&name, |w| Ok(write_history_csv(&state.history, !common.deterministic, w)?))?;
        let diff = max_abs_diff(&state.iterate.coupling()?, &plan);
        let last = state.history.last().expect("dimf_run records the initial iterate");
        println!(
            "{} alpha={alpha} N={n}: {} projections, path KL {:.3e}, max |coupling - plan| {:.3e}",
            cfg.reference.name(),
            state.markov_steps(),
            last.path_kl,
            diff
        );
        runs.push(RunSummary {
            alpha,
            num_intermediate: n,
            history: name,
            iterations: state.markov_steps(),
            final_path_kl: last.path_kl,
            max_abs_diff_to_plan: diff,
            fixed_point_matches_sinkhorn: diff < cfg.match_tol,
        });
    }
    out.write_json("summary.json", &Summary { config: cfg, runs })?;
    Ok(())
}
