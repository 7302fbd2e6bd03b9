//! Exact discrete-time iterative Markovian fitting.
//!
//! Starting from a reciprocal process with the prescribed endpoint marginals,
//! the loop alternates Markovian and reciprocal projections. Each half step
//! is logged with its path-space KL to a target process (normally the
//! Schrödinger bridge obtained from the Sinkhorn plan) and the KL between
//! endpoint couplings.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::prob::{kl_couplings, CategoricalDistribution, Coupling, MarkovChainProcess, DEFAULT_PROB_FLOOR};
use crate::projections::{
    coupling_of_chain, markovian_projection, path_kl_markov, path_kl_reciprocal, reciprocal_projection,
    ReciprocalProcess,
};
use crate::reference::ReferenceProcess;

/// Slack allowed on the monotone decrease of the KL to the target.
pub const NON_DECREASE_SLACK: f64 = 1e-9;

/// Largest number of paths `characterization_check` will enumerate.
pub const ENUMERATION_LIMIT: u128 = 4_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Reciprocal,
    Markov,
}

impl Parity {
    pub fn name(&self) -> &'static str {
        match self {
            Parity::Reciprocal => "reciprocal",
            Parity::Markov => "markov",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Iterate {
    Reciprocal(ReciprocalProcess),
    Markov(MarkovChainProcess),
}

impl Iterate {
    pub fn parity(&self) -> Parity {
        match self {
            Iterate::Reciprocal(_) => Parity::Reciprocal,
            Iterate::Markov(_) => Parity::Markov,
        }
    }

    pub fn coupling(&self) -> Result<Coupling> {
        match self {
            Iterate::Reciprocal(r) => Ok(r.coupling().clone()),
            Iterate::Markov(m) => coupling_of_chain(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    /// Half-step counter; the initial process is 0.
    pub iteration: usize,
    pub parity: Parity,
    pub path_kl: f64,
    pub coupling_kl: f64,
    pub wall_time_ms: f64,
}

/// The target process in both representations.
#[derive(Debug, Clone)]
pub struct DimfTarget {
    pub reciprocal: ReciprocalProcess,
    pub markov: MarkovChainProcess,
}

impl DimfTarget {
    /// Lifts a static plan to path space through the reference bridges.
    pub fn from_plan(plan: &Coupling, reference: &Arc<ReferenceProcess>) -> Result<Self> {
        let reciprocal = reciprocal_projection(plan, reference)?;
        let markov = markovian_projection(&reciprocal)?;
        Ok(Self { reciprocal, markov })
    }

    fn path_kl(&self, iterate: &Iterate) -> Result<f64> {
        match iterate {
            Iterate::Reciprocal(r) => path_kl_reciprocal(r, &self.reciprocal),
            Iterate::Markov(m) => path_kl_markov(m, &self.markov),
        }
    }
}

#[derive(Debug, Clone)]
pub enum DimfInit {
    /// `p0 ⊗ p1`.
    Independent,
    FromCoupling(Coupling),
}

#[derive(Debug, Clone)]
pub struct DimfState {
    pub iterate: Iterate,
    pub half_steps: usize,
    pub history: Vec<HistoryEntry>,
    reference: Arc<ReferenceProcess>,
}

impl DimfState {
    pub fn reference(&self) -> &Arc<ReferenceProcess> {
        &self.reference
    }

    /// Number of completed Markovian projections.
    pub fn markov_steps(&self) -> usize {
        self.half_steps.div_ceil(2)
    }
}

/// Initial reciprocal process `q^0` over the chosen coupling.
pub fn dimf_init(
    p0: &CategoricalDistribution,
    p1: &CategoricalDistribution,
    reference: &Arc<ReferenceProcess>,
    init: DimfInit,
) -> Result<DimfState> {
    p0.require_full_support(DEFAULT_PROB_FLOOR)?;
    p1.require_full_support(DEFAULT_PROB_FLOOR)?;
    let coupling = match init {
        DimfInit::Independent => Coupling::product(p0, p1)?,
        DimfInit::FromCoupling(c) => c,
    };
    Ok(DimfState {
        iterate: Iterate::Reciprocal(reciprocal_projection(&coupling, reference)?),
        half_steps: 0,
        history: Vec::new(),
        reference: Arc::clone(reference),
    })
}

/// Applies the projection matching the current parity.
pub fn dimf_step(state: DimfState) -> Result<DimfState> {
    let iterate = match &state.iterate {
        Iterate::Reciprocal(r) => Iterate::Markov(markovian_projection(r)?),
        Iterate::Markov(m) => Iterate::Reciprocal(reciprocal_projection(&coupling_of_chain(m)?, &state.reference)?),
    };
    Ok(DimfState {
        iterate,
        half_steps: state.half_steps + 1,
        history: state.history,
        reference: state.reference,
    })
}

/// Iterates until the path KL to `target` drops below `kl_tol` or `max_iters`
/// Markovian projections have been made.
pub fn dimf_run(mut state: DimfState, target: &DimfTarget, max_iters: usize, kl_tol: f64) -> Result<DimfState> {
    let start = Instant::now();
    let target_plan = target.reciprocal.coupling().clone();
    let record = |state: &mut DimfState| -> Result<f64> {
        let path_kl = target.path_kl(&state.iterate)?;
        let coupling_kl = kl_couplings(&state.iterate.coupling()?, &target_plan)?;
        if let Some(prev) = state.history.last() {
            if path_kl > prev.path_kl + NON_DECREASE_SLACK {
                return Err(Error::NonDecreaseDetected {
                    iteration: state.half_steps,
                    previous: prev.path_kl,
                    current: path_kl,
                });
            }
        }
        state.history.push(HistoryEntry {
            iteration: state.half_steps,
            parity: state.iterate.parity(),
            path_kl,
            coupling_kl,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        Ok(path_kl)
    };

    if state.history.is_empty() && record(&mut state)? < kl_tol {
        return Ok(state);
    }
    let budget = state.markov_steps() + max_iters;
    loop {
        if matches!(state.iterate, Iterate::Reciprocal(_)) && state.markov_steps() >= budget {
            return Ok(state);
        }
        state = dimf_step(state)?;
        if record(&mut state)? < kl_tol {
            return Ok(state);
        }
    }
}

/// Writes the history as CSV `iteration,parity,path_kl,coupling_kl,wall_time_ms`.
///
/// With `include_timing = false` the timing column is written as 0 so that
/// repeated runs produce identical bytes.
pub fn write_history_csv<W: Write>(history: &[HistoryEntry], include_timing: bool, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "parity", "path_kl", "coupling_kl", "wall_time_ms"])?;
    for h in history {
        let time = if include_timing { h.wall_time_ms } else { 0.0 };
        w.write_record([
            h.iteration.to_string(),
            h.parity.name().to_string(),
            format!("{:e}", h.path_kl),
            format!("{:e}", h.coupling_kl),
            format!("{time:.3}"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Residuals certifying that a Markov chain is the Schrödinger bridge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharacterizationReport {
    /// Deviation from Markov factorization; zero for a chain by construction.
    pub markov_residual: f64,
    /// Largest deviation between the chain's bridges and the reference bridges.
    pub reciprocal_residual: f64,
    /// TV distance of the chain's marginals at `t_0` and `t_{N+1}` to `p0`, `p1`.
    pub marginal_residuals: (f64, f64),
}

impl CharacterizationReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.markov_residual <= tol
            && self.reciprocal_residual <= tol
            && self.marginal_residuals.0 <= tol
            && self.marginal_residuals.1 <= tol
    }
}

/// Enumerates every path of `m` and compares its bridges with those of `reference`.
pub fn characterization_check(
    m: &MarkovChainProcess,
    reference: &ReferenceProcess,
    p0: &CategoricalDistribution,
    p1: &CategoricalDistribution,
) -> Result<CharacterizationReport> {
    if m.space() != reference.space() || m.grid() != reference.grid() {
        return Err(Error::SpaceMismatch);
    }
    let k = m.space().num_states();
    let steps = m.grid().num_transitions();
    let count = (k as u128).checked_pow(steps as u32 + 1).unwrap_or(u128::MAX);
    if count > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge {
            count,
            limit: ENUMERATION_LIMIT,
        });
    }
    let chain: Vec<_> = m.transitions().iter().map(|t| t.matrix().to_owned()).collect();
    let refs = (1..=steps)
        .map(|n| reference.full_transition(n))
        .collect::<Result<Vec<_>>>()?;

    // Path masses under both processes, grouped by endpoints.
    let mut chain_paths = vec![0.0; count as usize];
    let mut ref_paths = vec![0.0; count as usize];
    let mut chain_ends = vec![0.0; k * k];
    let mut ref_ends = vec![0.0; k * k];
    let mut path = vec![0usize; steps + 1];
    for idx in 0..count as usize {
        let mut rest = idx;
        for slot in path.iter_mut().rev() {
            *slot = rest % k;
            rest /= k;
        }
        let mut pm = m.initial().prob(path[0]);
        let mut pr = 1.0;
        for n in 0..steps {
            pm *= chain[n][[path[n], path[n + 1]]];
            pr *= refs[n][[path[n], path[n + 1]]];
        }
        chain_paths[idx] = pm;
        ref_paths[idx] = pr;
        let e = path[0] * k + path[steps];
        chain_ends[e] += pm;
        ref_ends[e] += pr;
    }

    let mut reciprocal_residual: f64 = 0.0;
    for idx in 0..count as usize {
        let (x0, x1) = (idx / k.pow(steps as u32), idx % k);
        let e = x0 * k + x1;
        if chain_ends[e] <= DEFAULT_PROB_FLOOR {
            continue;
        }
        if ref_ends[e] <= 0.0 {
            return Err(Error::ZeroMassPath { from: x0, to: x1 });
        }
        let diff = chain_paths[idx] / chain_ends[e] - ref_paths[idx] / ref_ends[e];
        reciprocal_residual = reciprocal_residual.max(diff.abs());
    }

    let marginals = m.time_marginals();
    let tv = |a: &[f64], b: &[f64]| 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let first = tv(marginals[0].as_slice().expect("contiguous"), p0.as_slice());
    let last = tv(marginals[steps].as_slice().expect("contiguous"), p1.as_slice());

    Ok(CharacterizationReport {
        markov_residual: 0.0,
        reciprocal_residual,
        marginal_residuals: (first, last),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::marginals_linear;
    use crate::eot::{cost_from_reference, sinkhorn_solve, EotProblem};
    use crate::prob::{coupling_marginals, tv_couplings, TransitionMatrix};
    use crate::projections::pairwise_joint;
    use crate::reference::{build_gaussian_reference, build_uniform_reference};
    use crate::space::{StateSpace, TimeGrid};

    fn setup(s: usize, n: usize, alpha: f64) -> (Arc<ReferenceProcess>, CategoricalDistribution, CategoricalDistribution, DimfTarget) {
        let reference = Arc::new(build_gaussian_reference(StateSpace::line(s).unwrap(), TimeGrid::new(n), alpha).unwrap());
        let (p0, p1) = marginals_linear(s).unwrap();
        let problem = EotProblem::new(p0.clone(), p1.clone(), cost_from_reference(&reference).unwrap()).unwrap();
        let plan = sinkhorn_solve(&problem, 100_000, 1e-13).unwrap().plan;
        let target = DimfTarget::from_plan(&plan, &reference).unwrap();
        (reference, p0, p1, target)
    }

    #[test]
    fn init_variants() {
        let (reference, p0, p1, target) = setup(5, 2, 0.5);
        let s = dimf_init(&p0, &p1, &reference, DimfInit::Independent).unwrap();
        assert_eq!(s.iterate.coupling().unwrap(), Coupling::product(&p0, &p1).unwrap());
        let (a, b) = coupling_marginals(&s.iterate.coupling().unwrap());
        assert_eq!(a, p0);
        assert!(crate::prob::tv_distance(&b, &p1).unwrap() < 1e-15);

        let plan = target.reciprocal.coupling().clone();
        let s = dimf_init(&p0, &p1, &reference, DimfInit::FromCoupling(plan.clone())).unwrap();
        assert_eq!(s.iterate.coupling().unwrap(), plan);

        let bad = CategoricalDistribution::point_mass(p0.space(), 0).unwrap();
        assert!(matches!(
            dimf_init(&bad, &p1, &reference, DimfInit::Independent),
            Err(Error::SupportViolation(1))
        ));
    }

    #[test]
    fn fixed_point_is_stable() {
        let (reference, p0, p1, target) = setup(6, 2, 0.5);
        let plan = target.reciprocal.coupling().clone();
        let s = dimf_init(&p0, &p1, &reference, DimfInit::FromCoupling(plan.clone())).unwrap();
        let s = dimf_step(dimf_step(s).unwrap()).unwrap();
        assert!(tv_couplings(&s.iterate.coupling().unwrap(), &plan).unwrap() < 1e-10);

        let s = dimf_init(&p0, &p1, &reference, DimfInit::FromCoupling(plan)).unwrap();
        let s = dimf_run(s, &target, 5, 1e-12).unwrap();
        assert_eq!(s.history.len(), 1);
        assert!(s.history[0].path_kl < 1e-12);
    }

    #[test]
    fn steps_preserve_what_they_should() {
        let (reference, p0, p1, _) = setup(5, 2, 0.4);
        let s = dimf_init(&p0, &p1, &reference, DimfInit::Independent).unwrap();
        let Iterate::Reciprocal(before) = s.iterate.clone() else { unreachable!() };
        let s = dimf_step(s).unwrap();
        let Iterate::Markov(m) = s.iterate.clone() else { unreachable!() };
        // Markov step keeps the neighbouring-pair joints.
        let marginals = m.time_marginals();
        for n in 1..=3 {
            let joint = pairwise_joint(&before, n).unwrap();
            let t = m.transition(n).matrix();
            for ((x, y), &v) in joint.indexed_iter() {
                assert!((v - marginals[n - 1][x] * t[[x, y]]).abs() < 1e-14);
            }
        }
        // Reciprocal step keeps the coupling.
        let c = s.iterate.coupling().unwrap();
        let s = dimf_step(s).unwrap();
        assert_eq!(s.iterate.coupling().unwrap(), c);
    }

    #[test]
    fn run_converges_monotonically() {
        let (reference, p0, p1, target) = setup(10, 3, 0.5);
        let s = dimf_init(&p0, &p1, &reference, DimfInit::Independent).unwrap();
        let s = dimf_run(s, &target, 200, 1e-13).unwrap();
        let last = s.history.last().unwrap();
        assert!(last.path_kl < 1e-13);
        for w in s.history.windows(2) {
            assert!(w[1].path_kl <= w[0].path_kl + NON_DECREASE_SLACK);
        }
        let plan = target.reciprocal.coupling();
        let c = s.iterate.coupling().unwrap();
        let diff = (&c.probs() - &plan.probs()).iter().fold(0f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-6);
    }

    #[test]
    fn budget_limits_markov_steps() {
        let (reference, p0, p1, target) = setup(10, 3, 0.5);
        let s = dimf_init(&p0, &p1, &reference, DimfInit::Independent).unwrap();
        let s = dimf_run(s, &target, 2, 0.0).unwrap();
        assert_eq!(s.markov_steps(), 2);
        assert_eq!(s.history.len(), 5);
        assert_eq!(s.history.last().unwrap().parity, Parity::Reciprocal);
    }

    #[test]
    fn wrong_target_triggers_non_decrease() {
        // Monotonicity only holds towards a process that is both Markov and
        // reciprocal; an arbitrary reciprocal target exposes the guard.
        let (reference, p0, p1, _) = setup(5, 2, 0.5);
        let mut found = false;
        for shift in 1..5 {
            let weights = ndarray::Array2::from_shape_fn((5, 5), |(i, j)| if (i + shift) % 5 == j { 10.0 } else { 1.0 });
            let bogus = Coupling::from_weights(p0.space(), weights).unwrap();
            let target = DimfTarget::from_plan(&bogus, &reference).unwrap();
            let s = dimf_init(&p0, &p1, &reference, DimfInit::Independent).unwrap();
            if let Err(Error::NonDecreaseDetected { .. }) = dimf_run(s, &target, 50, 0.0) {
                found = true;
            }
        }
        assert!(found);
    }

    #[test]
    fn characterization_of_converged_and_perturbed_chains() {
        let (reference, p0, p1, target) = setup(5, 2, 0.5);
        let s = dimf_init(&p0, &p1, &reference, DimfInit::Independent).unwrap();
        let s = dimf_run(s, &target, 200, 1e-14).unwrap();
        let s = if matches!(s.iterate, Iterate::Reciprocal(_)) { dimf_step(s).unwrap() } else { s };
        let Iterate::Markov(m) = &s.iterate else { unreachable!() };
        let report = characterization_check(m, &reference, &p0, &p1).unwrap();
        assert!(report.reciprocal_residual < 1e-6, "{report:?}");
        assert!(report.marginal_residuals.0 < 1e-10 && report.marginal_residuals.1 < 1e-10);

        let mut transitions: Vec<_> = m.transitions().to_vec();
        let mut t = transitions[1].clone().into_array();
        t.row_mut(2).assign(&ndarray::array![0.6, 0.1, 0.1, 0.1, 0.1]);
        transitions[1] = TransitionMatrix::new(t).unwrap();
        let bad = MarkovChainProcess::new(m.grid(), m.initial().clone(), transitions).unwrap();
        let report = characterization_check(&bad, &reference, &p0, &p1).unwrap();
        assert!(report.reciprocal_residual > 1e-3);
        assert!(!report.passes(1e-6));
    }

    #[test]
    fn initial_process_is_reciprocal_but_not_the_bridge() {
        let reference = Arc::new(build_uniform_reference(StateSpace::line(4).unwrap(), TimeGrid::new(1), 0.3).unwrap());
        let (p0, p1) = marginals_linear(4).unwrap();
        let s = dimf_init(&p0, &p1, &reference, DimfInit::Independent).unwrap();
        let Iterate::Reciprocal(r) = &s.iterate else { unreachable!() };
        // Markov chain of q^0 has reference bridges only if q^0 were the bridge.
        let m = markovian_projection(r).unwrap();
        let report = characterization_check(&m, &reference, &p0, &p1).unwrap();
        assert!(report.reciprocal_residual > 1e-6);
    }

    #[test]
    fn enumeration_limit() {
        let reference = build_uniform_reference(StateSpace::line(50).unwrap(), TimeGrid::new(10), 0.3).unwrap();
        let (p0, p1) = marginals_linear(50).unwrap();
        let m = MarkovChainProcess::new(reference.grid(), p0.clone(), vec![TransitionMatrix::identity(50); 11]).unwrap();
        assert!(matches!(
            characterization_check(&m, &reference, &p0, &p1),
            Err(Error::EnumerationTooLarge { .. })
        ));
    }

    #[test]
    fn history_csv() {
        let h = vec![HistoryEntry {
            iteration: 0,
            parity: Parity::Reciprocal,
            path_kl: 0.5,
            coupling_kl: 0.25,
            wall_time_ms: 1.234,
        }];
        let mut buf = Vec::new();
        write_history_csv(&h, false, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iteration,parity,path_kl,coupling_kl,wall_time_ms\n0,reciprocal,5e-1,2.5e-1,0.000\n"
        );
    }
}
