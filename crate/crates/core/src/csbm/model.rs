use std::io::{Read, Write};
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{sample_index, softmax_into};
use crate::prob::{CategoricalDistribution, Coupling, MarkovChainProcess, TransitionMatrix};
use crate::projections::coupling_of_chain;
use crate::reference::{ReferenceProcess, EXACT_STATE_LIMIT};
use crate::space::{StateSpace, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn name(&self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

/// Per-coordinate reference bridge tables, precomputed once per reference.
///
/// `forward(n, prev)` is an `S x S` table whose row `e` is
/// `q^ref(x_{t_n} | x_{t_{n-1}} = prev, x_1 = e)`; `backward(n, next)` has row
/// `e` equal to `q^ref(x_{t_{n-1}} | x_{t_n} = next, x_0 = e)`. Rows for
/// endpoints the reference cannot reach are zero and flagged invalid.
#[derive(Debug, Clone)]
pub struct BridgeCache {
    reference: Arc<ReferenceProcess>,
    s: usize,
    forward: Vec<f64>,
    backward: Vec<f64>,
    log_forward: Vec<f64>,
    log_backward: Vec<f64>,
    forward_valid: Vec<bool>,
    backward_valid: Vec<bool>,
    posterior: Vec<f64>,
}

impl BridgeCache {
    pub fn new(reference: &Arc<ReferenceProcess>) -> Result<Self> {
        let s = reference.num_categories();
        let grid = reference.grid();
        let t = grid.terminal();
        let block = s * s * s;
        let mut forward = vec![0.0; t * block];
        let mut backward = vec![0.0; t * block];
        let mut log_forward = vec![f64::NEG_INFINITY; t * block];
        let mut log_backward = vec![f64::NEG_INFINITY; t * block];
        let mut forward_valid = vec![false; t * s * s];
        let mut backward_valid = vec![false; t * s * s];
        for n in 1..=t {
            for c in 0..s {
                for e in 0..s {
                    let row = ((n - 1) * s + c) * s + e;
                    match reference.log_forward_step_coord(n, c, e) {
                        Ok(p) => {
                            let p = p.as_slice().expect("contiguous");
                            log_forward[row * s..(row + 1) * s].copy_from_slice(p);
                            for (o, l) in forward[row * s..(row + 1) * s].iter_mut().zip(p) {
                                *o = l.exp();
                            }
                            forward_valid[row] = true;
                        }
                        Err(Error::ZeroMassPath { .. }) => {}
                        Err(e) => return Err(e),
                    }
                    match reference.log_backward_step_coord(n, c, e) {
                        Ok(p) => {
                            let p = p.as_slice().expect("contiguous");
                            log_backward[row * s..(row + 1) * s].copy_from_slice(p);
                            for (o, l) in backward[row * s..(row + 1) * s].iter_mut().zip(p) {
                                *o = l.exp();
                            }
                            backward_valid[row] = true;
                        }
                        Err(Error::ZeroMassPath { .. }) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        // Posteriors of the interior times 1..=N, indexed by (n, a0, a1).
        let mut posterior = vec![f64::NAN; (t + 1) * s * s * s];
        for n in 1..t {
            for a0 in 0..s {
                for a1 in 0..s {
                    let off = ((n * s + a0) * s + a1) * s;
                    match reference.endpoint_posterior_coord(n, a0, a1) {
                        Ok(p) => posterior[off..off + s].copy_from_slice(p.as_slice().expect("contiguous")),
                        Err(Error::ZeroMassPath { .. }) => {}
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        Ok(Self {
            reference: Arc::clone(reference),
            s,
            forward,
            backward,
            log_forward,
            log_backward,
            forward_valid,
            backward_valid,
            posterior,
        })
    }

    pub fn reference(&self) -> &Arc<ReferenceProcess> {
        &self.reference
    }

    /// Step table for `direction` at transition `n`, conditioned on coordinate `c`.
    pub fn table(&self, direction: Direction, n: usize, c: usize) -> &[f64] {
        let s = self.s;
        let off = ((n - 1) * s + c) * s * s;
        match direction {
            Direction::Forward => &self.forward[off..off + s * s],
            Direction::Backward => &self.backward[off..off + s * s],
        }
    }

    /// Elementwise logarithm of `table`.
    pub fn log_table(&self, direction: Direction, n: usize, c: usize) -> &[f64] {
        let s = self.s;
        let off = ((n - 1) * s + c) * s * s;
        match direction {
            Direction::Forward => &self.log_forward[off..off + s * s],
            Direction::Backward => &self.log_backward[off..off + s * s],
        }
    }

    pub fn valid(&self, direction: Direction, n: usize, c: usize) -> &[bool] {
        let s = self.s;
        let off = ((n - 1) * s + c) * s;
        match direction {
            Direction::Forward => &self.forward_valid[off..off + s],
            Direction::Backward => &self.backward_valid[off..off + s],
        }
    }

    /// Samples `x_{t_n}` of the reference bridge between full states `x0` and `x1`, `0 ≤ n ≤ N+1`.
    pub fn sample_bridge_state<R: Rng + ?Sized>(&self, n: usize, x0: usize, x1: usize, rng: &mut R) -> Result<usize> {
        let space = self.reference.space();
        let t = self.reference.grid().terminal();
        if n == 0 {
            return Ok(x0);
        }
        if n == t {
            return Ok(x1);
        }
        let s = self.s;
        let mut out = 0;
        for d in 0..space.num_dimensions() {
            let (a0, a1) = (space.coordinate(x0, d), space.coordinate(x1, d));
            let off = ((n * s + a0) * s + a1) * s;
            let p = &self.posterior[off..off + s];
            if p[0].is_nan() {
                return Err(Error::ZeroMassPath { from: x0, to: x1 });
            }
            out = out * s + sample_index(p, rng);
        }
        Ok(out)
    }
}

/// Endpoint predictor with one logit row per (conditioning state, transition, dimension).
///
/// A forward model at transition `n` reads `x_{t_{n-1}}` and predicts `x_1`; a
/// backward model at transition `n` reads `x_{t_n}` and predicts `x_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularEndpointModel {
    direction: Direction,
    space: StateSpace,
    grid: TimeGrid,
    logits: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    direction: Direction,
    #[serde(rename = "S")]
    s: usize,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "N")]
    n: usize,
    logits: Vec<f64>,
}

impl TabularEndpointModel {
    /// All-zero logits.
    pub fn uniform(direction: Direction, space: StateSpace, grid: TimeGrid) -> Self {
        let len = space.num_states() * grid.num_transitions() * space.num_dimensions() * space.num_categories();
        Self {
            direction,
            space,
            grid,
            logits: vec![0.0; len],
        }
    }

    /// Logits set to the reference endpoint law, so that the induced chain is
    /// the reference itself (forward) or its reversal under a uniform start
    /// (backward). Each row is floored at `floor` below its maximum so that
    /// endpoints the reference deems implausible stay learnable.
    pub fn from_reference(direction: Direction, reference: &ReferenceProcess, floor: f64) -> Self {
        let mut model = Self::uniform(direction, reference.space(), reference.grid());
        let (space, t) = (model.space, model.grid.terminal());
        let s = space.num_categories();
        for x in 0..space.num_states() {
            for n in 1..=t {
                for d in 0..space.num_dimensions() {
                    let c = space.coordinate(x, d);
                    let off = model.row_offset(x, n, d);
                    let row = &mut model.logits[off..off + s];
                    match direction {
                        Direction::Forward => {
                            let lc = reference.log_cumulative(n - 1, t);
                            for (e, v) in row.iter_mut().enumerate() {
                                *v = lc[[c, e]];
                            }
                        }
                        Direction::Backward => {
                            let lc = reference.log_cumulative(0, n);
                            for (e, v) in row.iter_mut().enumerate() {
                                *v = lc[[e, c]];
                            }
                        }
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row.iter_mut().for_each(|v| *v = (*v - max).max(-floor));
                }
            }
        }
        model
    }

    pub fn from_logits(direction: Direction, space: StateSpace, grid: TimeGrid, logits: Vec<f64>) -> Result<Self> {
        let model = Self::uniform(direction, space, grid);
        if logits.len() != model.logits.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} logits, got {}",
                model.logits.len(),
                logits.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite logit".into()));
        }
        Ok(Self { logits, ..model })
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Offset of the logit row for conditioning state `x`, transition `n` in `1..=N+1`, dimension `d`.
    pub fn row_offset(&self, x: usize, n: usize, d: usize) -> usize {
        let (s, dims) = (self.space.num_categories(), self.space.num_dimensions());
        ((x * self.grid.num_transitions() + (n - 1)) * dims + d) * s
    }

    pub fn row(&self, x: usize, n: usize, d: usize) -> &[f64] {
        let off = self.row_offset(x, n, d);
        &self.logits[off..off + self.space.num_categories()]
    }

    /// Predicted endpoint distribution of coordinate `d`.
    pub fn endpoint_probs(&self, x: usize, n: usize, d: usize, out: &mut [f64]) {
        softmax_into(self.row(x, n, d), out);
    }

    fn check_compatible(&self, cache: &BridgeCache) -> Result<()> {
        let r = cache.reference();
        if r.space() != self.space || r.grid() != self.grid {
            return Err(Error::ReferenceMismatch);
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, out: W) -> Result<()> {
        let ck = Checkpoint {
            direction: self.direction,
            s: self.space.num_categories(),
            d: self.space.num_dimensions(),
            n: self.grid.num_intermediate(),
            logits: self.logits.clone(),
        };
        serde_json::to_writer(out, &ck)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(input)?;
        Self::from_logits(ck.direction, StateSpace::new(ck.s, ck.d)?, TimeGrid::new(ck.n), ck.logits)
    }
}

/// Mixes the bridge step table over the predicted endpoint, per coordinate.
///
/// Endpoints the reference cannot reach from `c` are dropped and the remaining
/// weights renormalized.
pub(crate) fn mix_coordinate(probs: &[f64], table: &[f64], valid: &[bool], out: &mut [f64]) {
    let s = probs.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut total = 0.0;
    for (e, &p) in probs.iter().enumerate() {
        if p == 0.0 || !valid[e] {
            continue;
        }
        total += p;
        for (o, &b) in out.iter_mut().zip(&table[e * s..(e + 1) * s]) {
            *o += p * b;
        }
    }
    if total > 0.0 && total != 1.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
}

/// One-step law of each coordinate: for a forward model the law of `x_{t_n}`
/// given `x_{t_{n-1}} = x`, for a backward model the law of `x_{t_{n-1}}`
/// given `x_{t_n} = x`.
pub fn model_transition(
    model: &TabularEndpointModel,
    cache: &BridgeCache,
    n: usize,
    x: usize,
) -> Result<Vec<CategoricalDistribution>> {
    model.check_compatible(cache)?;
    let t = model.grid.terminal();
    if n == 0 || n > t {
        return Err(Error::TimeIndex { n, lo: 1, hi: t });
    }
    model.space.check(x)?;
    let coord = model.space.coordinate_space();
    let s = coord.num_categories();
    let mut probs = vec![0.0; s];
    (0..model.space.num_dimensions())
        .map(|d| {
            let c = model.space.coordinate(x, d);
            model.endpoint_probs(x, n, d, &mut probs);
            let mut out = vec![0.0; s];
            mix_coordinate(
                &probs,
                cache.table(model.direction, n, c),
                cache.valid(model.direction, n, c),
                &mut out,
            );
            CategoricalDistribution::from_weights(coord, out.into())
        })
        .collect()
}

/// Full-space transition matrix of step `n` (from `x_{t_{n-1}}` to `x_{t_n}`
/// for forward models, from `x_{t_n}` to `x_{t_{n-1}}` for backward models).
pub fn model_transition_matrix(model: &TabularEndpointModel, cache: &BridgeCache, n: usize) -> Result<Array2<f64>> {
    let k = model.space.num_states();
    if k > EXACT_STATE_LIMIT {
        return Err(Error::EnumerationTooLarge {
            count: k as u128,
            limit: EXACT_STATE_LIMIT as u128,
        });
    }
    let mut m = Array2::zeros((k, k));
    let dims = model.space.num_dimensions();
    let mut coords = vec![0; dims];
    for x in 0..k {
        let factors = model_transition(model, cache, n, x)?;
        for y in 0..k {
            model.space.unflatten_into(y, &mut coords);
            m[[x, y]] = coords.iter().zip(&factors).map(|(&c, f)| f.prob(c)).product();
        }
    }
    Ok(m)
}

/// Markov chain of a forward model started from `p0`.
pub fn induced_chain(model: &TabularEndpointModel, cache: &BridgeCache, p0: &CategoricalDistribution) -> Result<MarkovChainProcess> {
    if model.direction != Direction::Forward {
        return Err(Error::InvalidConfig("induced_chain needs a forward model".into()));
    }
    let transitions = (1..=model.grid.terminal())
        .map(|n| TransitionMatrix::new(model_transition_matrix(model, cache, n)?))
        .collect::<Result<Vec<_>>>()?;
    MarkovChainProcess::new(model.grid, p0.clone(), transitions)
}

/// Endpoint coupling of the model started from its own side's marginal
/// (`p0` for forward models, `p1` at the terminal time for backward models).
pub fn induced_coupling(model: &TabularEndpointModel, cache: &BridgeCache, start: &CategoricalDistribution) -> Result<Coupling> {
    match model.direction {
        Direction::Forward => coupling_of_chain(&induced_chain(model, cache, start)?),
        Direction::Backward => {
            let space = model.space;
            let k = space.num_states();
            let mut acc = Array2::<f64>::eye(k);
            for n in (1..=model.grid.terminal()).rev() {
                acc = acc.dot(&model_transition_matrix(model, cache, n)?);
            }
            // acc[x1, x0] = P(x0 | x1); weight by p1 and transpose.
            let probs = Array2::from_shape_fn((k, k), |(x0, x1)| start.prob(x1) * acc[[x1, x0]]);
            Coupling::from_weights(space, probs)
        }
    }
}

/// Samples a path with the model, returned in time order `t_0, .., t_{N+1}`,
/// together with the far endpoint (`x_1` for forward, `x_0` for backward).
pub fn rollout<R: Rng + ?Sized>(
    model: &TabularEndpointModel,
    cache: &BridgeCache,
    x_start: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, usize)> {
    model.check_compatible(cache)?;
    model.space.check(x_start)?;
    let space = model.space;
    let (s, dims, t) = (space.num_categories(), space.num_dimensions(), model.grid.terminal());
    let mut probs = vec![0.0; s];
    let mut path = Vec::with_capacity(t + 1);
    let mut x = x_start;
    path.push(x);
    let steps: Vec<usize> = match model.direction {
        Direction::Forward => (1..=t).collect(),
        Direction::Backward => (1..=t).rev().collect(),
    };
    for n in steps {
        let mut next = 0;
        for d in 0..dims {
            let c = space.coordinate(x, d);
            model.endpoint_probs(x, n, d, &mut probs);
            let valid = cache.valid(model.direction, n, c);
            for (p, &ok) in probs.iter_mut().zip(valid) {
                if !ok {
                    *p = 0.0;
                }
            }
            let e = sample_index(&probs, rng);
            if !valid[e] {
                return Err(Error::ZeroMassPath { from: c, to: e });
            }
            let table = cache.table(model.direction, n, c);
            next = next * s + sample_index(&table[e * s..(e + 1) * s], rng);
        }
        x = next;
        path.push(x);
    }
    if model.direction == Direction::Backward {
        path.reverse();
    }
    Ok((path, x))
}
