//! Exports the entropic plan for the chosen marginals and cost.

use ndarray::Array2;
use serde::Serialize;

use catbridge::datasets::marginals_linear;
use catbridge::eot::{cost_from_reference, eot_objective, plan_optimality_check, sinkhorn_solve, write_plan_csv, EotProblem};
use catbridge::prob::CategoricalDistribution;
use catbridge::reference::product_of_factors;
use catbridge::rng::{component_rng, streams};
use rand::Rng;

use crate::config::{CostKind, Failure, MarginalKind, SinkhornConfig};
use crate::output::OutDir;
use crate::CommonArgs;

#[derive(Debug, Serialize)]
struct Summary<'a> {
    config: &'a SinkhornConfig,
    iterations: usize,
    marginal_error: f64,
    objective: f64,
    /// `None` when the check was skipped.
    optimal: Option<bool>,
}

fn marginal(kind: MarginalKind, cfg: &SinkhornConfig) -> Result<CategoricalDistribution, Failure> {
    let s = cfg.num_categories;
    let factor = match kind {
        MarginalKind::Uniform => ndarray::Array1::from_elem(s, 1.0 / s as f64),
        MarginalKind::Linear => marginals_linear(s)?.1.into_array(),
    };
    let space = catbridge::space::StateSpace::new(s, cfg.num_dimensions)?;
    let factors = vec![factor; cfg.num_dimensions];
    Ok(CategoricalDistribution::new(space, product_of_factors(space, &factors))?)
}

pub fn run(cfg: &SinkhornConfig, common: &CommonArgs) -> Result<(), Failure> {
    let out = OutDir::create(&common.out)?;
    let r = cfg.reference()?;
    let p0 = marginal(cfg.p0, cfg)?;
    let p1 = marginal(cfg.p1, cfg)?;
    let k = r.space().num_states();
    let cost = match cfg.cost {
        CostKind::Reference => cost_from_reference(&r)?,
        CostKind::Constant => Array2::zeros((k, k)),
    };
    let problem = EotProblem::new(p0, p1, cost)?;
    let solved = sinkhorn_solve(&problem, cfg.max_iters, cfg.tol)?;
    out.write("plan.csv", |w| Ok(write_plan_csv(&solved.plan, w)?))?;

    let optimal = if cfg.optimality_competitors > 0 {
        let seed = component_rng(cfg.seed, streams::OPTIMALITY).random();
        Some(plan_optimality_check(&solved.plan, &problem, 1e-9, cfg.optimality_competitors, seed)?)
    } else {
        None
    };
    let objective = eot_objective(&solved.plan, &problem.cost);
    println!(
        "sinkhorn: {} iterations, marginal error {:.3e}, objective {objective:.10}",
        solved.iterations, solved.marginal_error
    );
    out.write_json(
        "summary.json",
        &Summary {
            config: cfg,
            iterations: solved.iterations,
            marginal_error: solved.marginal_error,
            objective,
            optimal,
        },
    )?;
    if optimal == Some(false) {
        return Err(Failure::Property("a feasible competitor beats the Sinkhorn plan".into()));
    }
    Ok(())
}
