//! Reciprocal and Markovian projections.
//!
//! A reciprocal process is stored as its endpoint coupling together with the
//! reference whose bridges fill in the intermediate moments. Every quantity
//! below is obtained by contracting the coupling against full-space
//! cumulative reference matrices, so path tensors are never materialized.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::prob::{
    coupling_marginals, kl_couplings, kl_slices, Coupling, MarkovChainProcess, TransitionMatrix,
};
use crate::reference::ReferenceProcess;

/// `q(x0, x_in, x1) = q(x0, x1) · q^ref(x_in | x0, x1)`.
#[derive(Debug, Clone)]
pub struct ReciprocalProcess {
    coupling: Coupling,
    reference: Arc<ReferenceProcess>,
}

impl ReciprocalProcess {
    pub fn coupling(&self) -> &Coupling {
        &self.coupling
    }

    pub fn reference(&self) -> &Arc<ReferenceProcess> {
        &self.reference
    }

    /// Marginal of `x_{t_n}` for `0 ≤ n ≤ N+1`.
    pub fn time_marginal(&self, n: usize) -> Result<Array1<f64>> {
        let t = self.reference.grid().terminal();
        if n == t {
            return Ok(self.coupling.probs().sum_axis(Axis(0)));
        }
        Ok(pairwise_joint(self, n + 1)?.sum_axis(Axis(1)))
    }
}

/// Replaces the bridges of a process with the reference bridges, keeping `coupling`.
pub fn reciprocal_projection(coupling: &Coupling, reference: &Arc<ReferenceProcess>) -> Result<ReciprocalProcess> {
    if coupling.space() != reference.space() {
        return Err(Error::SpaceMismatch);
    }
    Ok(ReciprocalProcess {
        coupling: coupling.clone(),
        reference: Arc::clone(reference),
    })
}

/// `π(x0, x1) / C[0→N+1](x0, x1)`, zero where the coupling is zero.
fn coupling_over_reference(r: &ReciprocalProcess) -> Result<Array2<f64>> {
    let reference = &r.reference;
    let end_to_end = reference.full_cumulative(0, reference.grid().terminal())?;
    let pi = r.coupling.probs();
    let mut w = Array2::zeros(pi.dim());
    for ((i, j), &p) in pi.indexed_iter() {
        if p > 0.0 {
            let c = end_to_end[[i, j]];
            if c <= 0.0 {
                return Err(Error::ZeroMassPath { from: i, to: j });
            }
            w[[i, j]] = p / c;
        }
    }
    Ok(w)
}

/// Joint law of `(x_{t_{n-1}}, x_{t_n})` under a reciprocal process, `1 ≤ n ≤ N+1`.
///
/// `J[x, x'] = Q_n[x, x'] · Σ_{x0, x1} C[0→n-1][x0, x] · π[x0, x1] / C[0→N+1][x0, x1] · C[n→N+1][x', x1]`.
pub fn pairwise_joint(r: &ReciprocalProcess, n: usize) -> Result<Array2<f64>> {
    let reference = &r.reference;
    let t = reference.grid().terminal();
    if n == 0 || n > t {
        return Err(Error::IndexOrder { a: n.saturating_sub(1), b: n });
    }
    let w = coupling_over_reference(r)?;
    joint_from_weights(reference, &w, n)
}

fn joint_from_weights(reference: &ReferenceProcess, w: &Array2<f64>, n: usize) -> Result<Array2<f64>> {
    let t = reference.grid().terminal();
    let head = reference.full_cumulative(0, n - 1)?;
    let tail = reference.full_cumulative(n, t)?;
    let step = reference.full_transition(n)?;
    let inner = head.t().dot(w).dot(&tail.t());
    Ok(step * inner)
}

/// Markov chain with the initial marginal and one-step transitions of `r`.
pub fn markovian_projection(r: &ReciprocalProcess) -> Result<MarkovChainProcess> {
    let reference = &r.reference;
    let grid = reference.grid();
    let w = coupling_over_reference(r)?;
    let mut transitions = Vec::with_capacity(grid.num_transitions());
    for n in 1..=grid.num_transitions() {
        let mut joint = joint_from_weights(reference, &w, n)?;
        for (state, mut row) in joint.outer_iter_mut().enumerate() {
            let mass = row.sum();
            if mass <= 0.0 {
                return Err(Error::ZeroMarginal { time: n - 1, state });
            }
            row /= mass;
        }
        transitions.push(TransitionMatrix::new(joint)?);
    }
    let (initial, _) = coupling_marginals(&r.coupling);
    MarkovChainProcess::new(grid, initial, transitions)
}

/// Endpoint coupling `p0(x0) · [Q_1 ⋯ Q_{N+1}](x0, x1)` of a Markov chain.
pub fn coupling_of_chain(m: &MarkovChainProcess) -> Result<Coupling> {
    let p0 = m.initial().probs();
    let mut probs = m.end_to_end();
    for (mut row, &p) in probs.outer_iter_mut().zip(p0.iter()) {
        row *= p;
    }
    Coupling::new(m.space(), probs)
}

/// Path-space `KL(a || b)` between Markov chains by the chain rule.
pub fn path_kl_markov(a: &MarkovChainProcess, b: &MarkovChainProcess) -> Result<f64> {
    if a.space() != b.space() || a.grid() != b.grid() {
        return Err(Error::SpaceMismatch);
    }
    let mut total = kl_slices(a.initial().as_slice(), b.initial().as_slice())?;
    let marginals = a.time_marginals();
    for n in 1..=a.grid().num_transitions() {
        let (ta, tb) = (a.transition(n).matrix(), b.transition(n).matrix());
        for (x, &mass) in marginals[n - 1].iter().enumerate() {
            if mass > 0.0 {
                let ra = ta.row(x);
                let rb = tb.row(x);
                total += mass * kl_slices(ra.as_slice().expect("row"), rb.as_slice().expect("row"))?;
            }
        }
    }
    Ok(total)
}

/// Path-space `KL(a || b)` between reciprocal processes sharing a reference.
///
/// Shared bridges make the conditional part of the disintegration vanish, so
/// this is the KL between the couplings.
pub fn path_kl_reciprocal(a: &ReciprocalProcess, b: &ReciprocalProcess) -> Result<f64> {
    if !a.reference.same_as(&b.reference) {
        return Err(Error::ReferenceMismatch);
    }
    kl_couplings(&a.coupling, &b.coupling)
}
