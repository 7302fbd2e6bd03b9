use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{BridgeCache, Direction, TabularEndpointModel};
use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;
use crate::rng::child_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Kl,
    Mse,
}

/// Batch-averaged loss and its parts. `kl_term` holds the divergence part
/// (including the terminal log-likelihood), `simple_term` the unweighted
/// endpoint cross-entropy.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub kl_term: f64,
    pub simple_term: f64,
}

impl LossValue {
    fn add_scaled(&mut self, other: &LossValue, w: f64) {
        self.loss += w * other.loss;
        self.kl_term += w * other.kl_term;
        self.simple_term += w * other.simple_term;
    }
}

/// Gradient restricted to the logit rows it touches, keyed by row offset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGradient {
    rows: BTreeMap<usize, Vec<f64>>,
}

impl SparseGradient {
    pub fn add_row(&mut self, offset: usize, values: &[f64]) {
        match self.rows.get_mut(&offset) {
            Some(row) => row.iter_mut().zip(values).for_each(|(a, b)| *a += b),
            None => {
                self.rows.insert(offset, values.to_vec());
            }
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// Value for logit index `i` (zero if its row is untouched).
    pub fn get(&self, i: usize, row_len: usize) -> f64 {
        let row = i - i % row_len;
        self.rows.get(&row).map_or(0.0, |r| r[i - row])
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Single Monte-Carlo point: transition `n` and the conditioning state
/// (`x_{t_{n-1}}` for forward models, `x_{t_n}` for backward models).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossPoint {
    pub n: usize,
    pub x: usize,
}

/// Draws `n ~ U[1, N+1]` and the conditioning state from the reference bridge.
pub fn sample_point<R: Rng + ?Sized>(
    direction: Direction,
    cache: &BridgeCache,
    pair: (usize, usize),
    rng: &mut R,
) -> Result<LossPoint> {
    let t = cache.reference().grid().terminal();
    let n = rng.random_range(1..=t);
    let time = match direction {
        Direction::Forward => n - 1,
        Direction::Backward => n,
    };
    let x = cache.sample_bridge_state(time, pair.0, pair.1, rng)?;
    Ok(LossPoint { n, x })
}

/// Loss of a single point with every term multiplied by `weight`; the
/// gradient (if requested) is accumulated into `grad`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn point_loss(
    model: &TabularEndpointModel,
    cache: &BridgeCache,
    kind: LossKind,
    lambda: f64,
    point: LossPoint,
    pair: (usize, usize),
    weight: f64,
    mut grad: Option<&mut SparseGradient>,
) -> LossValue {
    let space = model.space();
    let direction = model.direction();
    let s = space.num_categories();
    let t = model.grid().terminal();
    let endpoint = match direction {
        Direction::Forward => pair.1,
        Direction::Backward => pair.0,
    };
    let terminal = match direction {
        Direction::Forward => point.n == t,
        Direction::Backward => point.n == 1,
    };
    let mut work = Workspace::new(s);
    let mut value = LossValue::default();
    for d in 0..space.num_dimensions() {
        let c = space.coordinate(point.x, d);
        let e = space.coordinate(endpoint, d);
        let off = model.row_offset(point.x, point.n, d);
        let logits = &model.logits()[off..off + s];
        let divergence = coordinate_terms(
            kind,
            logits,
            cache.table(direction, point.n, c),
            cache.log_table(direction, point.n, c),
            e,
            &mut work,
        );
        let simple = if kind == LossKind::Kl && !terminal { -work.log_pi[e] } else { 0.0 };
        value.kl_term += weight * divergence;
        value.simple_term += weight * simple;
        value.loss += weight * (divergence + lambda * simple);

        if let Some(grad) = grad.as_deref_mut() {
            let mut out: Vec<f64> = work.grad.iter().map(|g| weight * g).collect();
            if kind == LossKind::Kl && !terminal {
                for (k, o) in out.iter_mut().enumerate() {
                    let onehot = if k == e { 1.0 } else { 0.0 };
                    *o += weight * lambda * (work.pi[k] - onehot);
                }
            }
            grad.add_row(off, &out);
        }
    }
    value
}

struct Workspace {
    log_pi: Vec<f64>,
    pi: Vec<f64>,
    m: Vec<f64>,
    log_m: Vec<f64>,
    grad: Vec<f64>,
    ratio: Vec<f64>,
    under: Vec<bool>,
}

impl Workspace {
    fn new(s: usize) -> Self {
        Self {
            log_pi: vec![0.0; s],
            pi: vec![0.0; s],
            m: vec![0.0; s],
            log_m: vec![0.0; s],
            grad: vec![0.0; s],
            ratio: vec![0.0; s],
            under: vec![false; s],
        }
    }
}

/// `exp` of anything below this is zero in double precision.
const EXP_UNDERFLOW: f64 = -746.0;

/// Below this the mixture is recomputed in the log domain.
const LINEAR_FLOOR: f64 = 1e-200;

/// Divergence between the bridge step towards endpoint `e` and the model's
/// mixture for one coordinate; leaves the gradient w.r.t. the logit row in
/// `work.grad`. Expects every endpoint row of `table` to be a distribution.
fn coordinate_terms(kind: LossKind, logits: &[f64], table: &[f64], log_table: &[f64], e: usize, work: &mut Workspace) -> f64 {
    let s = logits.len();
    let lse = log_sum_exp(logits);
    for k in 0..s {
        work.log_pi[k] = logits[k] - lse;
        work.pi[k] = if work.log_pi[k] > EXP_UNDERFLOW { work.log_pi[k].exp() } else { 0.0 };
    }
    let target = &table[e * s..(e + 1) * s];
    let log_target = &log_table[e * s..(e + 1) * s];
    work.m.iter_mut().for_each(|v| *v = 0.0);
    for (j, &p) in work.pi.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (o, &b) in work.m.iter_mut().zip(&table[j * s..(j + 1) * s]) {
            *o += p * b;
        }
    }
    match kind {
        LossKind::Kl => {
            // Columns whose mixture underflows are redone in the log domain;
            // `log_m` is only meaningful where `under[st]` is set.
            let mut divergence = 0.0;
            for st in 0..s {
                work.under[st] = false;
                work.ratio[st] = 0.0;
                let t = target[st];
                if t == 0.0 {
                    continue;
                }
                if work.m[st] > LINEAR_FLOOR {
                    work.ratio[st] = t / work.m[st];
                    divergence += t * work.ratio[st].ln();
                    continue;
                }
                work.under[st] = true;
                let mut hi = f64::NEG_INFINITY;
                for j in 0..s {
                    hi = hi.max(work.log_pi[j] + log_table[j * s + st]);
                }
                let mut acc = 0.0;
                for j in 0..s {
                    let a = work.log_pi[j] + log_table[j * s + st] - hi;
                    if a > EXP_UNDERFLOW {
                        acc += a.exp();
                    }
                }
                work.log_m[st] = hi + acc.ln();
                divergence += t * (log_target[st] - work.log_m[st]);
            }
            // r_j = pi_j * sum_s t_s B_js / m_s; gradient is pi - r.
            for j in 0..s {
                let row = &table[j * s..(j + 1) * s];
                let mut r = work.pi[j] * row.iter().zip(&work.ratio).map(|(b, q)| b * q).sum::<f64>();
                for st in (0..s).filter(|&st| work.under[st]) {
                    let a = work.log_pi[j] + log_table[j * s + st] - work.log_m[st];
                    if a > EXP_UNDERFLOW {
                        r += target[st] * a.exp();
                    }
                }
                work.grad[j] = work.pi[j] - r;
            }
            divergence
        }
        LossKind::Mse => {
            let divergence = target.iter().zip(&work.m).map(|(&t, &m)| (t - m) * (t - m)).sum();
            let mut mean = 0.0;
            for j in 0..s {
                let row = &table[j * s..(j + 1) * s];
                let h: f64 = row.iter().zip(target).zip(&work.m).map(|((&b, &t), &m)| 2.0 * (m - t) * b).sum();
                work.grad[j] = h;
                mean += work.pi[j] * h;
            }
            for j in 0..s {
                work.grad[j] = work.pi[j] * (work.grad[j] - mean);
            }
            divergence
        }
    }
}

/// Monte-Carlo loss over a batch of endpoint pairs `(x0, x1)` with one
/// `(n, bridge state)` draw per pair, scaled by `N+1` so that it estimates
/// the sum over transitions, and averaged over the batch.
///
/// Each pair draws from its own generator seeded from `rng` in batch order,
/// and per-pair results are reduced in batch order, so the result does not
/// depend on the number of threads.
pub fn batch_loss<R: Rng + ?Sized>(
    model: &TabularEndpointModel,
    cache: &BridgeCache,
    kind: LossKind,
    lambda: f64,
    batch: &[(usize, usize)],
    rng: &mut R,
) -> Result<(LossValue, SparseGradient)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let r = cache.reference();
    if r.space() != model.space() || r.grid() != model.grid() {
        return Err(Error::ReferenceMismatch);
    }
    for &(a, b) in batch {
        model.space().check(a)?;
        model.space().check(b)?;
    }
    let weight = model.grid().num_transitions() as f64 / batch.len() as f64;
    let seeds: Vec<_> = batch.iter().map(|_| child_rng(rng)).collect();
    let parts: Vec<(LossValue, SparseGradient)> = batch
        .par_iter()
        .zip(seeds)
        .map(|(&pair, mut prng)| {
            let point = sample_point(model.direction(), cache, pair, &mut prng)?;
            let mut grad = SparseGradient::default();
            let value = point_loss(model, cache, kind, lambda, point, pair, weight, Some(&mut grad));
            Ok((value, grad))
        })
        .collect::<Result<_>>()?;
    let mut total = LossValue::default();
    let mut grad = SparseGradient::default();
    for (v, g) in &parts {
        total.add_scaled(v, 1.0);
        for (off, row) in g.rows() {
            grad.add_row(off, row);
        }
    }
    Ok((total, grad))
}

fn require(model: &TabularEndpointModel, direction: Direction) -> Result<()> {
    if model.direction() != direction {
        return Err(Error::InvalidConfig(format!(
            "expected a {} model, got {}",
            direction.name(),
            model.direction().name()
        )));
    }
    Ok(())
}

/// Hybrid KL loss of a forward model.
pub fn loss_kl_forward<R: Rng + ?Sized>(
    model: &TabularEndpointModel,
    cache: &BridgeCache,
    batch: &[(usize, usize)],
    lambda: f64,
    rng: &mut R,
) -> Result<(LossValue, SparseGradient)> {
    require(model, Direction::Forward)?;
    batch_loss(model, cache, LossKind::Kl, lambda, batch, rng)
}

/// Hybrid KL loss of a backward model.
pub fn loss_kl_backward<R: Rng + ?Sized>(
    model: &TabularEndpointModel,
    cache: &BridgeCache,
    batch: &[(usize, usize)],
    lambda: f64,
    rng: &mut R,
) -> Result<(LossValue, SparseGradient)> {
    require(model, Direction::Backward)?;
    batch_loss(model, cache, LossKind::Kl, lambda, batch, rng)
}

/// Squared-error loss of a forward model, summed over categories of each coordinate.
pub fn loss_mse_forward<R: Rng + ?Sized>(
    model: &TabularEndpointModel,
    cache: &BridgeCache,
    batch: &[(usize, usize)],
    rng: &mut R,
) -> Result<(LossValue, SparseGradient)> {
    require(model, Direction::Forward)?;
    batch_loss(model, cache, LossKind::Mse, 0.0, batch, rng)
}

/// Squared-error loss of a backward model.
pub fn loss_mse_backward<R: Rng + ?Sized>(
    model: &TabularEndpointModel,
    cache: &BridgeCache,
    batch: &[(usize, usize)],
    rng: &mut R,
) -> Result<(LossValue, SparseGradient)> {
    require(model, Direction::Backward)?;
    batch_loss(model, cache, LossKind::Mse, 0.0, batch, rng)
}
