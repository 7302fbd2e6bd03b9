//! Reference Markov processes and their bridges.
//!
//! A reference process applies the same `S × S` transition matrix `Q_n`
//! independently to every coordinate. Only per-coordinate objects are stored;
//! full-space matrices over `S^D` states are built on request for exact
//! computations on small spaces.
//!
//! Transition and cumulative matrices are kept in log space as well as in
//! linear space. Bridge posteriors are always computed from the log tables, so
//! extremely unlikely (but possible) transitions of a sharp Gaussian reference
//! do not underflow to zero mass.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_matmul, log_sum_exp, normalize_log_weights, sample_index};
use crate::prob::{CategoricalDistribution, TransitionMatrix};
use crate::space::{StateSpace, TimeGrid};

/// Largest number of states for which full `S^D × S^D` matrices are built.
pub const EXACT_STATE_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferenceKind {
    /// Stay with probability `1 - α`, otherwise move uniformly.
    #[serde(rename = "unif", alias = "uniform")]
    Uniform,
    /// Discretized Gaussian kernel over ordered categories.
    #[serde(rename = "gauss", alias = "gaussian")]
    Gaussian,
    /// Arbitrary user-supplied per-coordinate transitions.
    #[serde(skip)]
    Custom,
}

impl ReferenceKind {
    pub fn name(&self) -> &'static str {
        match self {
            ReferenceKind::Uniform => "unif",
            ReferenceKind::Gaussian => "gauss",
            ReferenceKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for ReferenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unif" | "uniform" => Ok(Self::Uniform),
            "gauss" | "gaussian" => Ok(Self::Gaussian),
            other => Err(Error::InvalidConfig(format!("unknown reference kind `{other}`"))),
        }
    }
}

/// Serializable description `{kind, alpha, S, D, N}` of a reference process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub kind: ReferenceKind,
    pub alpha: f64,
    #[serde(rename = "S")]
    pub num_categories: usize,
    #[serde(rename = "D")]
    pub num_dimensions: usize,
    #[serde(rename = "N")]
    pub num_intermediate: usize,
}

impl ReferenceConfig {
    pub fn build(&self) -> Result<ReferenceProcess> {
        let space = StateSpace::new(self.num_categories, self.num_dimensions)?;
        let grid = TimeGrid::new(self.num_intermediate);
        match self.kind {
            ReferenceKind::Uniform => build_uniform_reference(space, grid, self.alpha),
            ReferenceKind::Gaussian => build_gaussian_reference(space, grid, self.alpha),
            ReferenceKind::Custom => Err(Error::InvalidConfig(
                "custom references cannot be built from a config".into(),
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceProcess {
    space: StateSpace,
    grid: TimeGrid,
    kind: ReferenceKind,
    alpha: f64,
    transitions: Vec<TransitionMatrix>,
    log_transitions: Vec<Array2<f64>>,
    // Indexed by a * (N + 2) + b for a <= b; a == b holds the identity.
    cumulative: Vec<Array2<f64>>,
    log_cumulative: Vec<Array2<f64>>,
}

/// Builds the uniform reference: `Q[x, x] = 1 - α`, `Q[x, x'] = α / (S - 1)`.
pub fn build_uniform_reference(space: StateSpace, grid: TimeGrid, alpha: f64) -> Result<ReferenceProcess> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange { kind: "unif", alpha });
    }
    let s = space.num_categories();
    let off = alpha / (s - 1) as f64;
    let (log_stay, log_off) = ((1.0 - alpha).ln(), off.ln());
    let log_q = Array2::from_shape_fn((s, s), |(i, j)| if i == j { log_stay } else { log_off });
    ReferenceProcess::from_log_homogeneous(space, grid, ReferenceKind::Uniform, alpha, log_q)
}

/// Builds the Gaussian-like reference over ordered categories with `Δ = S - 1`.
pub fn build_gaussian_reference(space: StateSpace, grid: TimeGrid, alpha: f64) -> Result<ReferenceProcess> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::AlphaOutOfRange { kind: "gauss", alpha });
    }
    let s = space.num_categories();
    let delta_max = (s - 1) as f64;
    let scale = (alpha * delta_max).powi(2);
    let energy = |delta: f64| -4.0 * delta * delta / scale;
    let offsets: Vec<f64> = (-(s as i64 - 1)..=(s as i64 - 1)).map(|d| energy(d as f64)).collect();
    let log_norm = log_sum_exp(&offsets);

    let mut log_q = Array2::zeros((s, s));
    for i in 0..s {
        let mut off_mass = 0.0;
        for j in 0..s {
            if i != j {
                let v = energy(j as f64 - i as f64) - log_norm;
                log_q[[i, j]] = v;
                off_mass += v.exp();
            }
        }
        log_q[[i, i]] = (-off_mass).ln_1p();
    }
    ReferenceProcess::from_log_homogeneous(space, grid, ReferenceKind::Gaussian, alpha, log_q)
}

impl ReferenceProcess {
    fn from_log_homogeneous(
        space: StateSpace,
        grid: TimeGrid,
        kind: ReferenceKind,
        alpha: f64,
        log_q: Array2<f64>,
    ) -> Result<Self> {
        let logs = vec![log_q; grid.num_transitions()];
        Self::from_log_transitions(space, grid, kind, alpha, logs)
    }

    /// Reference with arbitrary per-coordinate transitions `Q_1, .., Q_{N+1}`.
    pub fn from_transitions(space: StateSpace, grid: TimeGrid, transitions: Vec<TransitionMatrix>) -> Result<Self> {
        if transitions.len() != grid.num_transitions() {
            return Err(Error::InvalidConfig(format!(
                "{} transitions for a grid needing {}",
                transitions.len(),
                grid.num_transitions()
            )));
        }
        if transitions.iter().any(|t| t.size() != space.num_categories()) {
            return Err(Error::SpaceMismatch);
        }
        let logs = transitions.iter().map(|t| t.matrix().mapv(f64::ln)).collect();
        Self::from_log_transitions(space, grid, ReferenceKind::Custom, f64::NAN, logs)
    }

    fn from_log_transitions(
        space: StateSpace,
        grid: TimeGrid,
        kind: ReferenceKind,
        alpha: f64,
        log_transitions: Vec<Array2<f64>>,
    ) -> Result<Self> {
        let s = space.num_categories();
        let transitions = log_transitions
            .iter()
            .map(|l| TransitionMatrix::new(l.mapv(f64::exp)))
            .collect::<Result<Vec<_>>>()?;

        let stride = grid.num_transitions() + 1;
        let mut log_identity = Array2::from_elem((s, s), f64::NEG_INFINITY);
        log_identity.diag_mut().fill(0.0);
        let empty = Array2::zeros((0, 0));
        let mut log_cumulative = vec![empty; stride * stride];
        for a in 0..stride {
            log_cumulative[a * stride + a] = log_identity.clone();
            for b in a + 1..stride {
                let prev = &log_cumulative[a * stride + b - 1];
                log_cumulative[a * stride + b] = log_matmul(prev.view(), log_transitions[b - 1].view());
            }
        }
        let cumulative = log_cumulative.iter().map(|m| m.mapv(f64::exp)).collect();

        Ok(Self {
            space,
            grid,
            kind,
            alpha,
            transitions,
            log_transitions,
            cumulative,
            log_cumulative,
        })
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn kind(&self) -> ReferenceKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn num_categories(&self) -> usize {
        self.space.num_categories()
    }

    pub fn config(&self) -> Option<ReferenceConfig> {
        match self.kind {
            ReferenceKind::Custom => None,
            kind => Some(ReferenceConfig {
                kind,
                alpha: self.alpha,
                num_categories: self.space.num_categories(),
                num_dimensions: self.space.num_dimensions(),
                num_intermediate: self.grid.num_intermediate(),
            }),
        }
    }

    /// True when two handles describe the same process.
    pub fn same_as(&self, other: &ReferenceProcess) -> bool {
        std::ptr::eq(self, other)
            || (self.space == other.space
                && self.grid == other.grid
                && self.kind == other.kind
                && self.log_transitions == other.log_transitions)
    }

    /// Per-coordinate `Q_n`, `1 ≤ n ≤ N+1`.
    pub fn transition(&self, n: usize) -> &TransitionMatrix {
        &self.transitions[n - 1]
    }

    pub fn log_transition(&self, n: usize) -> ArrayView2<'_, f64> {
        self.log_transitions[n - 1].view()
    }

    fn stride(&self) -> usize {
        self.grid.num_transitions() + 1
    }

    /// Per-coordinate `C[a→b] = Q_{a+1} ⋯ Q_b` for `0 ≤ a < b ≤ N+1`.
    pub fn cumulative_transition(&self, a: usize, b: usize) -> Result<TransitionMatrix> {
        if a >= b || b > self.grid.terminal() {
            return Err(Error::IndexOrder { a, b });
        }
        TransitionMatrix::new(self.cumulative(a, b).to_owned())
    }

    /// Unchecked view of `C[a→b]` for `a ≤ b` (identity when equal).
    pub fn cumulative(&self, a: usize, b: usize) -> ArrayView2<'_, f64> {
        self.cumulative[a * self.stride() + b].view()
    }

    pub fn log_cumulative(&self, a: usize, b: usize) -> ArrayView2<'_, f64> {
        self.log_cumulative[a * self.stride() + b].view()
    }

    /// Whether every one-step transition probability is strictly positive.
    pub fn has_full_support(&self) -> bool {
        self.log_transitions
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn require_full_support(&self) -> Result<()> {
        if self.has_full_support() {
            Ok(())
        } else {
            Err(Error::AlphaDegenerate { alpha: self.alpha })
        }
    }

    fn check_time(&self, n: usize, lo: usize, hi: usize) -> Result<()> {
        if n < lo || n > hi {
            Err(Error::TimeIndex { n, lo, hi })
        } else {
            Ok(())
        }
    }

    fn check_coord(&self, a: usize) -> Result<()> {
        if a < self.space.num_categories() {
            Ok(())
        } else {
            Err(Error::StateIndex(a))
        }
    }

    fn log_normalized(&self, weights: Vec<f64>, from: usize, to: usize) -> Result<Array1<f64>> {
        let lse = log_sum_exp(&weights);
        if !lse.is_finite() {
            return Err(Error::ZeroMassPath { from, to });
        }
        Ok(Array1::from_vec(weights).mapv(|w| w - lse))
    }

    fn normalized(&self, mut weights: Vec<f64>, from: usize, to: usize) -> Result<Array1<f64>> {
        let lse = normalize_log_weights(&mut weights);
        if !lse.is_finite() {
            return Err(Error::ZeroMassPath { from, to });
        }
        Ok(Array1::from_vec(weights))
    }

    /// Per-coordinate `P(x_{t_n} = s | x_0 = a0, x_1 = a1)`, `0 ≤ n ≤ N+1`.
    pub fn endpoint_posterior_coord(&self, n: usize, a0: usize, a1: usize) -> Result<Array1<f64>> {
        let t = self.grid.terminal();
        self.check_time(n, 0, t)?;
        self.check_coord(a0)?;
        self.check_coord(a1)?;
        let (left, right) = (self.log_cumulative(0, n), self.log_cumulative(n, t));
        let w = (0..self.num_categories())
            .map(|s| left[[a0, s]] + right[[s, a1]])
            .collect();
        self.normalized(w, a0, a1)
    }

    /// Per-coordinate `P(x_{t_n} = s | x_{t_{n-1}} = prev, x_1 = a1)`, `1 ≤ n ≤ N+1`.
    pub fn forward_step_coord(&self, n: usize, prev: usize, a1: usize) -> Result<Array1<f64>> {
        Ok(self.log_forward_step_coord(n, prev, a1)?.mapv(f64::exp))
    }

    /// Logarithm of `forward_step_coord`, accurate where the probabilities underflow.
    pub fn log_forward_step_coord(&self, n: usize, prev: usize, a1: usize) -> Result<Array1<f64>> {
        let t = self.grid.terminal();
        self.check_time(n, 1, t)?;
        self.check_coord(prev)?;
        self.check_coord(a1)?;
        let (step, rest) = (self.log_transition(n), self.log_cumulative(n, t));
        let w = (0..self.num_categories())
            .map(|s| step[[prev, s]] + rest[[s, a1]])
            .collect();
        self.log_normalized(w, prev, a1)
    }

    /// Per-coordinate `P(x_{t_{n-1}} = s | x_{t_n} = next, x_0 = a0)`, `1 ≤ n ≤ N+1`.
    ///
    /// At `n = 1` this is the point mass at `a0`.
    pub fn backward_step_coord(&self, n: usize, next: usize, a0: usize) -> Result<Array1<f64>> {
        Ok(self.log_backward_step_coord(n, next, a0)?.mapv(f64::exp))
    }

    /// Logarithm of `backward_step_coord`.
    pub fn log_backward_step_coord(&self, n: usize, next: usize, a0: usize) -> Result<Array1<f64>> {
        let t = self.grid.terminal();
        self.check_time(n, 1, t)?;
        self.check_coord(next)?;
        self.check_coord(a0)?;
        let (head, step) = (self.log_cumulative(0, n - 1), self.log_transition(n));
        let w = (0..self.num_categories())
            .map(|s| head[[a0, s]] + step[[s, next]])
            .collect();
        self.log_normalized(w, a0, next)
    }

    /// Table `B[e, s] = P(x_{t_n} = s | x_{t_{n-1}} = prev, x_1 = e)` over all endpoints `e`.
    pub fn forward_step_table(&self, n: usize, prev: usize) -> Result<Array2<f64>> {
        let s = self.num_categories();
        let mut table = Array2::zeros((s, s));
        for e in 0..s {
            table.row_mut(e).assign(&self.forward_step_coord(n, prev, e)?);
        }
        Ok(table)
    }

    /// Table `B[e, s] = P(x_{t_{n-1}} = s | x_{t_n} = next, x_0 = e)` over all endpoints `e`.
    pub fn backward_step_table(&self, n: usize, next: usize) -> Result<Array2<f64>> {
        let s = self.num_categories();
        let mut table = Array2::zeros((s, s));
        for e in 0..s {
            table.row_mut(e).assign(&self.backward_step_coord(n, next, e)?);
        }
        Ok(table)
    }

    fn joint<F>(&self, x: usize, y: usize, per_coord: F) -> Result<CategoricalDistribution>
    where
        F: Fn(usize, usize) -> Result<Array1<f64>>,
    {
        self.space.check(x)?;
        self.space.check(y)?;
        let factors = (0..self.space.num_dimensions())
            .map(|d| per_coord(self.space.coordinate(x, d), self.space.coordinate(y, d)))
            .collect::<Result<Vec<_>>>()?;
        CategoricalDistribution::new(self.space, product_of_factors(self.space, &factors))
    }

    /// `q^ref(x_{t_n} | x_0, x_1)` over the full space, `1 ≤ n ≤ N`.
    pub fn bridge_endpoint_posterior(&self, n: usize, x0: usize, x1: usize) -> Result<CategoricalDistribution> {
        self.check_time(n, 1, self.grid.num_intermediate())?;
        self.joint(x0, x1, |a, b| self.endpoint_posterior_coord(n, a, b))
    }

    /// `q^ref(x_{t_n} | x_{t_{n-1}}, x_1)` over the full space, `1 ≤ n ≤ N+1`.
    pub fn bridge_forward_step(&self, n: usize, x_prev: usize, x1: usize) -> Result<CategoricalDistribution> {
        self.joint(x_prev, x1, |a, b| self.forward_step_coord(n, a, b))
    }

    /// `q^ref(x_{t_{n-1}} | x_{t_n}, x_0)` over the full space, `1 ≤ n ≤ N+1`.
    pub fn bridge_backward_step(&self, n: usize, x_next: usize, x0: usize) -> Result<CategoricalDistribution> {
        self.joint(x_next, x0, |a, b| self.backward_step_coord(n, a, b))
    }

    /// Draws `x_{t_n}` from `q^ref(x_{t_n} | x_0, x_1)` for any `0 ≤ n ≤ N+1`.
    pub fn sample_bridge_state<R: Rng + ?Sized>(&self, n: usize, x0: usize, x1: usize, rng: &mut R) -> Result<usize> {
        let mut coords = vec![0; self.space.num_dimensions()];
        for (d, c) in coords.iter_mut().enumerate() {
            let (a, b) = (self.space.coordinate(x0, d), self.space.coordinate(x1, d));
            let probs = self.endpoint_posterior_coord(n, a, b)?;
            *c = sample_index(probs.as_slice().expect("contiguous"), rng);
        }
        Ok(self.space.flatten(&coords))
    }

    /// Draws the intermediate states `x_{t_1}, .., x_{t_N}` of the bridge from `x0` to `x1`.
    pub fn sample_bridge_path<R: Rng + ?Sized>(&self, x0: usize, x1: usize, rng: &mut R) -> Result<Vec<usize>> {
        self.space.check(x0)?;
        self.space.check(x1)?;
        let dims = self.space.num_dimensions();
        let mut current = self.space.unflatten(x0);
        let target = self.space.unflatten(x1);
        let mut path = Vec::with_capacity(self.grid.num_intermediate());
        for n in 1..=self.grid.num_intermediate() {
            for d in 0..dims {
                let probs = self.forward_step_coord(n, current[d], target[d])?;
                current[d] = sample_index(probs.as_slice().expect("contiguous"), rng);
            }
            path.push(self.space.flatten(&current));
        }
        Ok(path)
    }

    fn check_exact(&self) -> Result<()> {
        let k = self.space.num_states();
        if k > EXACT_STATE_LIMIT {
            return Err(Error::EnumerationTooLarge {
                count: k as u128,
                limit: EXACT_STATE_LIMIT as u128,
            });
        }
        Ok(())
    }

    /// Full-space one-step matrix, the product over coordinates of `Q_n`.
    pub fn full_transition(&self, n: usize) -> Result<Array2<f64>> {
        self.check_time(n, 1, self.grid.terminal())?;
        self.check_exact()?;
        Ok(kron_power(self.transition(n).matrix(), self.space.num_dimensions()))
    }

    /// Full-space `C[a→b]` for `a ≤ b`.
    pub fn full_cumulative(&self, a: usize, b: usize) -> Result<Array2<f64>> {
        if a > b || b > self.grid.terminal() {
            return Err(Error::IndexOrder { a, b });
        }
        self.check_exact()?;
        Ok(kron_power(self.cumulative(a, b), self.space.num_dimensions()))
    }

    /// Full-space `log C[a→b]` for `a ≤ b`.
    pub fn full_log_cumulative(&self, a: usize, b: usize) -> Result<Array2<f64>> {
        if a > b || b > self.grid.terminal() {
            return Err(Error::IndexOrder { a, b });
        }
        self.check_exact()?;
        let log = self.log_cumulative(a, b);
        let space = self.space;
        let k = space.num_states();
        Ok(Array2::from_shape_fn((k, k), |(x, y)| {
            (0..space.num_dimensions())
                .map(|d| log[[space.coordinate(x, d), space.coordinate(y, d)]])
                .sum()
        }))
    }
}

/// Entry `(x, y)` is `Π_d m[x^d, y^d]` over a `D`-fold product space.
pub fn kron_power(m: ArrayView2<f64>, dims: usize) -> Array2<f64> {
    let mut out = m.to_owned();
    for _ in 1..dims {
        let (r, c) = out.dim();
        let (mr, mc) = m.dim();
        out = Array2::from_shape_fn((r * mr, c * mc), |(i, j)| out[[i / mr, j / mc]] * m[[i % mr, j % mc]]);
    }
    out
}

/// Full-space product distribution from per-coordinate factors.
pub fn product_of_factors(space: StateSpace, factors: &[Array1<f64>]) -> Array1<f64> {
    Array1::from_shape_fn(space.num_states(), |x| {
        factors
            .iter()
            .enumerate()
            .map(|(d, f)| f[space.coordinate(x, d)])
            .product()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space(s: usize, d: usize) -> StateSpace {
        StateSpace::new(s, d).unwrap()
    }

    fn random_stochastic(s: usize, rng: &mut ChaCha8Rng) -> TransitionMatrix {
        let mut m = Array2::from_shape_fn((s, s), |_| rng.random::<f64>() + 0.05);
        for mut row in m.rows_mut() {
            let t = row.sum();
            row /= t;
        }
        TransitionMatrix::new(m).unwrap()
    }

    #[test]
    fn uniform_examples() {
        let r = build_uniform_reference(space(4, 1), TimeGrid::new(2), 0.0).unwrap();
        for n in 1..=3 {
            assert_eq!(r.transition(n).matrix(), Array2::<f64>::eye(4));
        }
        let r = build_uniform_reference(space(2, 1), TimeGrid::new(0), 0.5).unwrap();
        assert_eq!(r.transition(1).matrix(), array![[0.5, 0.5], [0.5, 0.5]]);
        let r = build_uniform_reference(space(3, 1), TimeGrid::new(1), 0.3).unwrap();
        let q = r.transition(1).matrix();
        assert!((q[[1, 1]] - 0.7).abs() < 1e-15);
        assert!((q[[1, 2]] - 0.15).abs() < 1e-15);
        assert!(matches!(
            build_uniform_reference(space(3, 1), TimeGrid::new(1), 1.5),
            Err(Error::AlphaOutOfRange { .. })
        ));
    }

    #[test]
    fn gaussian_examples() {
        let r = build_gaussian_reference(space(2, 1), TimeGrid::new(0), 2.0).unwrap();
        let e = (-1f64).exp();
        let off = e / (2.0 * e + 1.0);
        let q = r.transition(1).matrix();
        assert!((q[[0, 1]] - off).abs() < 1e-15);
        assert!((q[[0, 0]] - (1.0 - off)).abs() < 1e-15);

        let r = build_gaussian_reference(space(7, 1), TimeGrid::new(0), 1e-4).unwrap();
        let q = r.transition(1).matrix();
        for ((i, j), v) in q.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((v - target).abs() < 1e-12);
        }
        assert!(build_gaussian_reference(space(3, 1), TimeGrid::new(0), 0.0).is_err());
        assert!(build_gaussian_reference(space(3, 1), TimeGrid::new(0), -1.0).is_err());
    }

    #[test]
    fn gaussian_rows_are_valid() {
        for &alpha in &[0.01, 0.1, 1.0, 10.0] {
            for &s in &[2, 3, 50] {
                let r = build_gaussian_reference(space(s, 1), TimeGrid::new(0), alpha).unwrap();
                let q = r.transition(1).matrix();
                for i in 0..s {
                    assert!(q.row(i).iter().all(|&v| v >= 0.0));
                    assert!(q[[i, i]] > 0.0);
                    assert!((q.row(i).sum() - 1.0).abs() < 1e-12);
                }
                assert!(r.has_full_support());
            }
        }
    }

    #[test]
    fn cumulative_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qs: Vec<_> = (0..3).map(|_| random_stochastic(3, &mut rng)).collect();
        let r = ReferenceProcess::from_transitions(space(3, 1), TimeGrid::new(2), qs.clone()).unwrap();
        assert_eq!(r.kind(), ReferenceKind::Custom);
        let naive = qs[0].matrix().dot(&qs[1].matrix()).dot(&qs[2].matrix());
        let c = r.cumulative_transition(0, 3).unwrap();
        for (a, b) in c.matrix().iter().zip(naive.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = r.cumulative_transition(1, 2).unwrap();
        for (a, b) in c.matrix().iter().zip(qs[1].matrix().iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(r.cumulative_transition(2, 2), Err(Error::IndexOrder { .. })));
        assert!(matches!(r.cumulative_transition(0, 4), Err(Error::IndexOrder { .. })));

        let id = build_uniform_reference(space(3, 1), TimeGrid::new(3), 0.0).unwrap();
        assert_eq!(id.cumulative_transition(0, 4).unwrap().matrix(), Array2::<f64>::eye(3));
    }

    #[test]
    fn chapman_kolmogorov() {
        let r = build_gaussian_reference(space(6, 1), TimeGrid::new(4), 0.4).unwrap();
        let t = r.grid().terminal();
        for a in 0..=t {
            for b in a..=t {
                for c in b..=t {
                    let lhs = r.cumulative(a, c);
                    let rhs = r.cumulative(a, b).dot(&r.cumulative(b, c));
                    for (x, y) in lhs.iter().zip(rhs.iter()) {
                        assert!((x - y).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn bridge_basic_cases() {
        let id = build_uniform_reference(space(3, 1), TimeGrid::new(2), 0.0).unwrap();
        let b = id.bridge_endpoint_posterior(1, 1, 1).unwrap();
        assert_eq!(b.as_slice(), &[0.0, 1.0, 0.0]);
        assert!(matches!(
            id.bridge_endpoint_posterior(1, 0, 2),
            Err(Error::ZeroMassPath { .. })
        ));
        let f = id.bridge_forward_step(1, 2, 2).unwrap();
        assert_eq!(f.as_slice(), &[0.0, 0.0, 1.0]);
        let bw = id.bridge_backward_step(2, 0, 0).unwrap();
        assert_eq!(bw.as_slice(), &[1.0, 0.0, 0.0]);

        let sym = build_uniform_reference(space(2, 1), TimeGrid::new(1), 0.5).unwrap();
        for x0 in 0..2 {
            for x1 in 0..2 {
                let b = sym.bridge_endpoint_posterior(1, x0, x1).unwrap();
                assert!((b.prob(0) - 0.5).abs() < 1e-15);
            }
        }

        // With one intermediate moment, the forward step at n = 1 is the endpoint posterior.
        let r = build_gaussian_reference(space(4, 1), TimeGrid::new(1), 0.5).unwrap();
        let a = r.bridge_forward_step(1, 3, 0).unwrap();
        let b = r.bridge_endpoint_posterior(1, 3, 0).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(matches!(r.bridge_endpoint_posterior(2, 0, 0), Err(Error::TimeIndex { .. })));
        assert!(matches!(r.bridge_forward_step(0, 0, 0), Err(Error::TimeIndex { .. })));
    }

    #[test]
    fn boundary_steps_are_point_masses() {
        let r = build_gaussian_reference(space(5, 1), TimeGrid::new(3), 0.5).unwrap();
        assert_eq!(r.forward_step_coord(4, 1, 3).unwrap().to_vec(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(r.backward_step_coord(1, 1, 2).unwrap().to_vec(), vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn sharp_gaussian_bridges_do_not_underflow() {
        // Linear-space cumulative entries underflow here; log tables keep the bridge defined.
        let r = build_gaussian_reference(space(50, 1), TimeGrid::new(10), 0.02).unwrap();
        assert_eq!(r.cumulative(0, 11)[[0, 49]], 0.0);
        let b = r.endpoint_posterior_coord(5, 0, 49).unwrap();
        assert!((b.sum() - 1.0).abs() < 1e-12);
        let argmax = b.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert!((15..=30).contains(&argmax), "bridge midpoint at {argmax}");
    }

    #[test]
    fn multi_dimensional_bridges_factorize() {
        let r = build_uniform_reference(space(3, 2), TimeGrid::new(2), 0.3).unwrap();
        let sp = r.space();
        let (x0, x1) = (sp.flatten(&[0, 2]), sp.flatten(&[1, 1]));
        let joint = r.bridge_endpoint_posterior(1, x0, x1).unwrap();
        let a = r.endpoint_posterior_coord(1, 0, 1).unwrap();
        let b = r.endpoint_posterior_coord(1, 2, 1).unwrap();
        for x in 0..sp.num_states() {
            let c = sp.unflatten(x);
            assert!((joint.prob(x) - a[c[0]] * b[c[1]]).abs() < 1e-15);
        }
    }

    #[test]
    fn kron_power_entries() {
        let m = array![[0.9, 0.1], [0.4, 0.6]];
        let k = kron_power(m.view(), 2);
        let sp = space(2, 2);
        for x in 0..4 {
            for y in 0..4 {
                let (a, b) = (sp.unflatten(x), sp.unflatten(y));
                assert!((k[[x, y]] - m[[a[0], b[0]]] * m[[a[1], b[1]]]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_reference_gives_constant_paths() {
        let r = build_uniform_reference(space(4, 2), TimeGrid::new(3), 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(r.sample_bridge_path(6, 6, &mut rng).unwrap(), vec![6, 6, 6]);
    }

    #[test]
    fn config_round_trip() {
        let json = r#"{"kind": "gauss", "alpha": 0.3, "S": 5, "D": 1, "N": 2}"#;
        let cfg: ReferenceConfig = serde_json::from_str(json).unwrap();
        let r = cfg.build().unwrap();
        assert_eq!(r.config(), Some(cfg));
        let again: ReferenceConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
        let bad = r#"{"kind": "gauss", "alpha": 0.3, "S": 5, "D": 1, "N": 2, "extra": 1}"#;
        assert!(serde_json::from_str::<ReferenceConfig>(bad).is_err());
    }
}
