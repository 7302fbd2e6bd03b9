//! Brute-force oracles shared by the integration tests.
//!
//! Everything here works on explicit path tables: a process over
//! `x_{t_0}, .., x_{t_{N+1}}` is the vector of probabilities of all
//! `|X|^{N+2}` paths, indexed with `x_{t_0}` as the most significant digit.
#![allow(dead_code)]

use std::sync::Arc;

use catbridge::prob::{CategoricalDistribution, Coupling, MarkovChainProcess, TransitionMatrix};
use catbridge::projections::ReciprocalProcess;
use catbridge::reference::{build_gaussian_reference, build_uniform_reference, ReferenceProcess};
use catbridge::space::{StateSpace, TimeGrid};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn space(s: usize, d: usize) -> StateSpace {
    StateSpace::new(s, d).unwrap()
}

pub fn reference(kind: &str, sp: StateSpace, n: usize, alpha: f64) -> Arc<ReferenceProcess> {
    let grid = TimeGrid::new(n);
    Arc::new(match kind {
        "unif" => build_uniform_reference(sp, grid, alpha).unwrap(),
        "gauss" => build_gaussian_reference(sp, grid, alpha).unwrap(),
        other => panic!("unknown reference {other}"),
    })
}

pub fn random_dist(sp: StateSpace, rng: &mut ChaCha8Rng) -> CategoricalDistribution {
    let w = Array1::from_shape_fn(sp.num_states(), |_| rng.random::<f64>() + 0.05);
    CategoricalDistribution::from_weights(sp, w).unwrap()
}

pub fn random_coupling(sp: StateSpace, rng: &mut ChaCha8Rng) -> Coupling {
    let k = sp.num_states();
    let w = Array2::from_shape_fn((k, k), |_| rng.random::<f64>() + 0.05);
    Coupling::from_weights(sp, w).unwrap()
}

pub fn random_transition(k: usize, rng: &mut ChaCha8Rng) -> TransitionMatrix {
    let mut m = Array2::from_shape_fn((k, k), |_| rng.random::<f64>() + 0.05);
    for mut row in m.rows_mut() {
        let t = row.sum();
        row /= t;
    }
    TransitionMatrix::new(m).unwrap()
}

pub fn random_chain(sp: StateSpace, n: usize, rng: &mut ChaCha8Rng) -> MarkovChainProcess {
    let grid = TimeGrid::new(n);
    let init = random_dist(sp, rng);
    let steps = (0..grid.num_transitions())
        .map(|_| random_transition(sp.num_states(), rng))
        .collect();
    MarkovChainProcess::new(grid, init, steps).unwrap()
}

/// Decodes a path index into its `N + 2` states.
pub fn decode(mut idx: usize, k: usize, len: usize) -> Vec<usize> {
    let mut path = vec![0; len];
    for slot in path.iter_mut().rev() {
        *slot = idx % k;
        idx /= k;
    }
    path
}

pub fn num_paths(k: usize, grid: TimeGrid) -> usize {
    k.pow(grid.num_transitions() as u32 + 1)
}

/// One-step reference probability between full states, multiplied out
/// coordinate by coordinate from the per-dimension matrices.
pub fn reference_step(r: &ReferenceProcess, n: usize, a: usize, b: usize) -> f64 {
    let sp = r.space();
    let q = r.transition(n).matrix();
    (0..sp.num_dimensions())
        .map(|d| q[[sp.coordinate(a, d), sp.coordinate(b, d)]])
        .product()
}

/// Unnormalized reference path weights (no initial law).
pub fn reference_paths(r: &ReferenceProcess) -> Vec<f64> {
    let (k, grid) = (r.space().num_states(), r.grid());
    let len = grid.num_transitions() + 1;
    (0..num_paths(k, grid))
        .map(|idx| {
            let p = decode(idx, k, len);
            (1..len).map(|n| reference_step(r, n, p[n - 1], p[n])).product()
        })
        .collect()
}

/// Paths of `coupling ⊗ reference bridges`.
pub fn reciprocal_paths(coupling: &Coupling, r: &ReferenceProcess) -> Vec<f64> {
    let (k, grid) = (r.space().num_states(), r.grid());
    let len = grid.num_transitions() + 1;
    let weights = reference_paths(r);
    let mut ends = vec![0.0; k * k];
    for (idx, w) in weights.iter().enumerate() {
        let p = decode(idx, k, len);
        ends[p[0] * k + p[len - 1]] += w;
    }
    let pi = coupling.probs();
    weights
        .iter()
        .enumerate()
        .map(|(idx, w)| {
            let p = decode(idx, k, len);
            let (a, b) = (p[0], p[len - 1]);
            if pi[[a, b]] == 0.0 {
                0.0
            } else {
                pi[[a, b]] * w / ends[a * k + b]
            }
        })
        .collect()
}

pub fn reciprocal_process_paths(r: &ReciprocalProcess) -> Vec<f64> {
    reciprocal_paths(r.coupling(), r.reference())
}

pub fn chain_paths(m: &MarkovChainProcess) -> Vec<f64> {
    let (k, grid) = (m.space().num_states(), m.grid());
    let len = grid.num_transitions() + 1;
    (0..num_paths(k, grid))
        .map(|idx| {
            let p = decode(idx, k, len);
            let mut w = m.initial().prob(p[0]);
            for n in 1..len {
                w *= m.transition(n).matrix()[[p[n - 1], p[n]]];
            }
            w
        })
        .collect()
}

/// Joint law of `(x_{t_a}, x_{t_b})` from a path table.
pub fn joint(paths: &[f64], k: usize, grid: TimeGrid, a: usize, b: usize) -> Array2<f64> {
    let len = grid.num_transitions() + 1;
    let mut out = Array2::zeros((k, k));
    for (idx, w) in paths.iter().enumerate() {
        let p = decode(idx, k, len);
        out[[p[a], p[b]]] += w;
    }
    out
}

pub fn marginal(paths: &[f64], k: usize, grid: TimeGrid, n: usize) -> Array1<f64> {
    joint(paths, k, grid, n, n).diag().to_owned()
}

/// `KL(p || q)` over path tables.
pub fn path_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

/// Conditional law of `x_{t_n}` given that `x_{t_a} = va` and `x_{t_b} = vb`.
pub fn conditional(paths: &[f64], k: usize, grid: TimeGrid, n: usize, fixed: [(usize, usize); 2]) -> Array1<f64> {
    let len = grid.num_transitions() + 1;
    let mut out = Array1::<f64>::zeros(k);
    for (idx, w) in paths.iter().enumerate() {
        let p = decode(idx, k, len);
        if fixed.iter().all(|&(t, v)| p[t] == v) {
            out[p[n]] += w;
        }
    }
    let total = out.sum();
    out / total
}

pub fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
