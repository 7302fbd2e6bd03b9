//! Small log-domain helpers.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

/// `log Σ exp(v)`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain matrix product: `out[i, j] = log Σ_k exp(a[i, k] + b[k, j])`.
pub fn log_matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions differ");
    let (rows, inner, cols) = (a.nrows(), a.ncols(), b.ncols());
    let mut out = Array2::from_elem((rows, cols), f64::NEG_INFINITY);
    let mut terms = vec![0.0; inner];
    for i in 0..rows {
        for j in 0..cols {
            for k in 0..inner {
                terms[k] = a[[i, k]] + b[[k, j]];
            }
            out[[i, j]] = log_sum_exp(&terms);
        }
    }
    out
}

/// Normalizes log-weights in place into probabilities. Returns the log normalizer.
pub fn normalize_log_weights(weights: &mut [f64]) -> f64 {
    let lse = log_sum_exp(weights);
    if lse.is_finite() {
        for w in weights.iter_mut() {
            *w = (*w - lse).exp();
        }
    }
    lse
}

/// Softmax of `logits` written into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Inverse-CDF draw from an (approximately) normalized probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// `p log(p / q)` with `0 log 0 = 0`.
#[inline]
pub fn xlogy_ratio(p: f64, q: f64) -> f64 {
    if p > 0.0 {
        p * (p / q).ln()
    } else {
        0.0
    }
}
