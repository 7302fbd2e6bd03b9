//! Entropic optimal transport with unit regularization, solved by log-domain Sinkhorn.
//!
//! With the cost `c = -log q^ref(x1 | x0)` the entropic problem is exactly the
//! static Schrödinger bridge for that reference, which makes the Sinkhorn plan
//! the ground truth for every bridge computation in the crate.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::prob::{entropy, CategoricalDistribution, Coupling};
use crate::reference::ReferenceProcess;

#[derive(Debug, Clone)]
pub struct EotProblem {
    pub p0: CategoricalDistribution,
    pub p1: CategoricalDistribution,
    pub cost: Array2<f64>,
}

impl EotProblem {
    pub fn new(p0: CategoricalDistribution, p1: CategoricalDistribution, cost: Array2<f64>) -> Result<Self> {
        let k = p0.space().num_states();
        if p0.space() != p1.space() || cost.dim() != (k, k) {
            return Err(Error::SpaceMismatch);
        }
        if let Some(((i, j), _)) = cost.indexed_iter().find(|(_, c)| !c.is_finite()) {
            return Err(Error::ZeroTransition { from: i, to: j });
        }
        Ok(Self { p0, p1, cost })
    }
}

/// A Sinkhorn plan with its log-domain potentials: `log π = f(x0) + g(x1) - c(x0, x1)`.
#[derive(Debug, Clone)]
pub struct SinkhornPlan {
    pub plan: Coupling,
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub iterations: usize,
    pub marginal_error: f64,
}

/// `c(x0, x1) = -log C[0→N+1](x0, x1)`, summed over coordinates.
pub fn cost_from_reference(reference: &ReferenceProcess) -> Result<Array2<f64>> {
    let log = reference.full_log_cumulative(0, reference.grid().terminal())?;
    if let Some(((i, j), _)) = log.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::ZeroTransition { from: i, to: j });
    }
    Ok(log.mapv(|v| -v))
}

/// Transport cost between two single states, without building the full table.
pub fn reference_pair_cost(reference: &ReferenceProcess, x0: usize, x1: usize) -> f64 {
    let space = reference.space();
    let log = reference.log_cumulative(0, reference.grid().terminal());
    -(0..space.num_dimensions())
        .map(|d| log[[space.coordinate(x0, d), space.coordinate(x1, d)]])
        .sum::<f64>()
}

struct Iterate {
    f: Array1<f64>,
    g: Array1<f64>,
    iterations: usize,
    error: f64,
    converged: bool,
}

fn plan_from_potentials(f: &Array1<f64>, g: &Array1<f64>, cost: ArrayView2<f64>) -> Array2<f64> {
    Array2::from_shape_fn(cost.dim(), |(i, j)| {
        let v = f[i] + g[j] - cost[[i, j]];
        if v.is_finite() {
            v.exp()
        } else {
            0.0
        }
    })
}

fn marginal_error(plan: &Array2<f64>, p0: &[f64], p1: &[f64]) -> f64 {
    let rows = plan.sum_axis(ndarray::Axis(1));
    let cols = plan.sum_axis(ndarray::Axis(0));
    let row_tv = 0.5 * rows.iter().zip(p0).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let col_tv = 0.5 * cols.iter().zip(p1).map(|(a, b)| (a - b).abs()).sum::<f64>();
    row_tv.max(col_tv)
}

/// Alternating log-domain potential updates from `f = g = 0`.
fn iterate(p0: &[f64], p1: &[f64], cost: ArrayView2<f64>, max_iters: usize, tol: f64) -> Iterate {
    let (rows, cols) = cost.dim();
    let log_p0: Vec<f64> = p0.iter().map(|p| p.ln()).collect();
    let log_p1: Vec<f64> = p1.iter().map(|p| p.ln()).collect();
    let mut f = Array1::zeros(rows);
    let mut g = Array1::zeros(cols);
    let mut buf_row = vec![0.0; cols];
    let mut buf_col = vec![0.0; rows];
    let mut error = f64::INFINITY;
    // Check the marginals every few sweeps; a check costs as much as a sweep.
    let check_every = 5;
    for it in 1..=max_iters {
        for i in 0..rows {
            for j in 0..cols {
                buf_row[j] = g[j] - cost[[i, j]];
            }
            f[i] = if log_p0[i] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                log_p0[i] - log_sum_exp(&buf_row)
            };
        }
        for j in 0..cols {
            for i in 0..rows {
                buf_col[i] = f[i] - cost[[i, j]];
            }
            g[j] = if log_p1[j] == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                log_p1[j] - log_sum_exp(&buf_col)
            };
        }
        if it % check_every == 0 || it == max_iters {
            error = marginal_error(&plan_from_potentials(&f, &g, cost), p0, p1);
            if error <= tol {
                return Iterate {
                    f,
                    g,
                    iterations: it,
                    error,
                    converged: true,
                };
            }
        }
    }
    Iterate {
        f,
        g,
        iterations: max_iters,
        error,
        converged: false,
    }
}

/// Solves `min_π E_π[c] - H(π)` over couplings of `(p0, p1)`.
///
/// Stops once both marginals are within `marginal_tol` in total variation.
pub fn sinkhorn_solve(problem: &EotProblem, max_iters: usize, marginal_tol: f64) -> Result<SinkhornPlan> {
    let it = iterate(
        problem.p0.as_slice(),
        problem.p1.as_slice(),
        problem.cost.view(),
        max_iters,
        marginal_tol,
    );
    if !it.converged {
        return Err(Error::NoConvergence {
            iterations: it.iterations,
            error: it.error,
        });
    }
    let plan = plan_from_potentials(&it.f, &it.g, problem.cost.view());
    Ok(SinkhornPlan {
        plan: Coupling::from_weights(problem.p0.space(), plan)?,
        f: it.f,
        g: it.g,
        iterations: it.iterations,
        marginal_error: it.error,
    })
}

/// Best-effort plan for a batch problem: the last iterate is returned even
/// without convergence, since callers only read its row maxima.
pub(crate) fn sinkhorn_plan_approx(p0: &[f64], p1: &[f64], cost: ArrayView2<f64>, max_iters: usize, tol: f64) -> Array2<f64> {
    let it = iterate(p0, p1, cost, max_iters, tol);
    plan_from_potentials(&it.f, &it.g, cost)
}

/// `E_π[c] - H(π)`.
pub fn eot_objective(plan: &Coupling, cost: &Array2<f64>) -> f64 {
    let expected: f64 = plan
        .probs()
        .iter()
        .zip(cost.iter())
        .map(|(&p, &c)| if p > 0.0 { p * c } else { 0.0 })
        .sum();
    expected - entropy(plan)
}

/// Checks that no feasible competitor beats `plan` on the entropic objective.
///
/// Competitors are the independent coupling, `num_random` Sinkhorn projections
/// of random kernels onto the marginals of `problem`, and the midpoints between
/// each of them and `plan`.
pub fn plan_optimality_check(
    plan: &Coupling,
    problem: &EotProblem,
    tol: f64,
    num_random: usize,
    seed: u64,
) -> Result<bool> {
    let best = eot_objective(plan, &problem.cost);
    let space = problem.p0.space();
    let k = space.num_states();
    let mut competitors = vec![Coupling::product(&problem.p0, &problem.p1)?];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..num_random {
        let random_cost = Array2::from_shape_fn((k, k), |_| 3.0 * rng.random::<f64>());
        let p = sinkhorn_plan_approx(
            problem.p0.as_slice(),
            problem.p1.as_slice(),
            random_cost.view(),
            10_000,
            1e-12,
        );
        competitors.push(Coupling::from_weights(space, p)?);
    }
    for c in &competitors {
        let mid = Coupling::from_weights(space, (&c.probs() + &plan.probs()) * 0.5)?;
        for candidate in [c, &mid] {
            if eot_objective(candidate, &problem.cost) < best - tol {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Writes a dense plan as CSV rows `x0,x1,prob`.
pub fn write_plan_csv<W: Write>(plan: &Coupling, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x0", "x1", "prob"])?;
    for ((i, j), p) in plan.probs().indexed_iter() {
        w.write_record([i.to_string(), j.to_string(), format!("{p:e}")])?;
    }
    w.flush()?;
    Ok(())
}
