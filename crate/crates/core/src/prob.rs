//! Probability objects over a finite state space and the divergences between them.
//!
//! All objects validate on construction and are immutable afterwards.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::numeric::xlogy_ratio;
use crate::space::{StateSpace, TimeGrid};

/// Tolerance on the total mass of a distribution or a transition row.
pub const MASS_TOL: f64 = 1e-12;

/// Floor used for full-support checks and for guarding logarithms.
pub const DEFAULT_PROB_FLOOR: f64 = 1e-300;

fn check_mass(values: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    let mut total = 0.0;
    for v in values {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::InvalidDistribution(format!("{what} has entry {v}")));
        }
        total += v;
    }
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::InvalidDistribution(format!(
            "{what} sums to {total} instead of 1"
        )));
    }
    Ok(())
}

/// A probability vector indexed by the states of a [`StateSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDistribution {
    space: StateSpace,
    probs: Array1<f64>,
}

impl CategoricalDistribution {
    pub fn new(space: StateSpace, probs: Array1<f64>) -> Result<Self> {
        if probs.len() != space.num_states() {
            return Err(Error::SpaceMismatch);
        }
        check_mass(probs.iter().copied(), "distribution")?;
        Ok(Self { space, probs })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(space: StateSpace, weights: Array1<f64>) -> Result<Self> {
        if weights.len() != space.num_states() {
            return Err(Error::SpaceMismatch);
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidDistribution("negative or non-finite weight".into()));
        }
        let total = weights.sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        Ok(Self {
            space,
            probs: weights / total,
        })
    }

    pub fn uniform(space: StateSpace) -> Self {
        let k = space.num_states();
        Self {
            space,
            probs: Array1::from_elem(k, 1.0 / k as f64),
        }
    }

    pub fn point_mass(space: StateSpace, state: usize) -> Result<Self> {
        space.check(state)?;
        let mut probs = Array1::zeros(space.num_states());
        probs[state] = 1.0;
        Ok(Self { space, probs })
    }

    /// Like [`new`](Self::new), additionally requiring every entry to be at least `floor`.
    pub fn with_full_support(space: StateSpace, probs: Array1<f64>, floor: f64) -> Result<Self> {
        let dist = Self::new(space, probs)?;
        dist.require_full_support(floor)?;
        Ok(dist)
    }

    pub fn require_full_support(&self, floor: f64) -> Result<()> {
        match self.probs.iter().position(|&p| p < floor || p == 0.0) {
            Some(i) => Err(Error::SupportViolation(i)),
            None => Ok(()),
        }
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn probs(&self) -> ArrayView1<'_, f64> {
        self.probs.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.probs.as_slice().expect("contiguous")
    }

    pub fn prob(&self, state: usize) -> f64 {
        self.probs[state]
    }

    pub fn into_array(self) -> Array1<f64> {
        self.probs
    }
}

/// Joint probability table over `(x0, x1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    space: StateSpace,
    probs: Array2<f64>,
}

impl Coupling {
    pub fn new(space: StateSpace, probs: Array2<f64>) -> Result<Self> {
        let k = space.num_states();
        if probs.dim() != (k, k) {
            return Err(Error::SpaceMismatch);
        }
        check_mass(probs.iter().copied(), "coupling")?;
        Ok(Self { space, probs })
    }

    pub fn from_weights(space: StateSpace, weights: Array2<f64>) -> Result<Self> {
        let k = space.num_states();
        if weights.dim() != (k, k) {
            return Err(Error::SpaceMismatch);
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidDistribution("negative or non-finite weight".into()));
        }
        let total = weights.sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        Ok(Self {
            space,
            probs: weights / total,
        })
    }

    /// The independent coupling `p ⊗ q`.
    pub fn product(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<Self> {
        if p.space != q.space {
            return Err(Error::SpaceMismatch);
        }
        let outer = p
            .probs
            .view()
            .insert_axis(Axis(1))
            .dot(&q.probs.view().insert_axis(Axis(0)));
        Ok(Self {
            space: p.space,
            probs: outer,
        })
    }

    /// The coupling concentrated on the diagonal, `diag(p)`.
    pub fn diagonal(p: &CategoricalDistribution) -> Self {
        Self {
            space: p.space,
            probs: Array2::from_diag(&p.probs),
        }
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn probs(&self) -> ArrayView2<'_, f64> {
        self.probs.view()
    }

    pub fn into_array(self) -> Array2<f64> {
        self.probs
    }
}

/// Row-stochastic matrix of conditionals `q(x' | x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    rows: Array2<f64>,
}

impl TransitionMatrix {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() != rows.ncols() || rows.nrows() == 0 {
            return Err(Error::InvalidDistribution("transition matrix must be square".into()));
        }
        for (i, row) in rows.outer_iter().enumerate() {
            check_mass(row.iter().copied(), &format!("transition row {i}"))?;
        }
        Ok(Self { rows })
    }

    pub fn identity(size: usize) -> Self {
        Self {
            rows: Array2::eye(size),
        }
    }

    pub fn size(&self) -> usize {
        self.rows.nrows()
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn row(&self, state: usize) -> ArrayView1<'_, f64> {
        self.rows.row(state)
    }

    pub fn into_array(self) -> Array2<f64> {
        self.rows
    }
}

/// Forward Markov chain on `N + 2` moments: initial marginal and `N + 1` transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChainProcess {
    space: StateSpace,
    grid: TimeGrid,
    initial: CategoricalDistribution,
    transitions: Vec<TransitionMatrix>,
}

impl MarkovChainProcess {
    pub fn new(
        grid: TimeGrid,
        initial: CategoricalDistribution,
        transitions: Vec<TransitionMatrix>,
    ) -> Result<Self> {
        if transitions.len() != grid.num_transitions() {
            return Err(Error::InvalidConfig(format!(
                "{} transitions for a grid needing {}",
                transitions.len(),
                grid.num_transitions()
            )));
        }
        let space = initial.space();
        if transitions.iter().any(|t| t.size() != space.num_states()) {
            return Err(Error::SpaceMismatch);
        }
        Ok(Self {
            space,
            grid,
            initial,
            transitions,
        })
    }

    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn initial(&self) -> &CategoricalDistribution {
        &self.initial
    }

    pub fn transitions(&self) -> &[TransitionMatrix] {
        &self.transitions
    }

    /// Transition `n` (from `t_{n-1}` to `t_n`), `1 ≤ n ≤ N+1`.
    pub fn transition(&self, n: usize) -> &TransitionMatrix {
        &self.transitions[n - 1]
    }

    /// Marginals at every moment `t_0, .., t_{N+1}`.
    pub fn time_marginals(&self) -> Vec<Array1<f64>> {
        let mut out = Vec::with_capacity(self.grid.num_transitions() + 1);
        let mut current = self.initial.probs.clone();
        out.push(current.clone());
        for t in &self.transitions {
            current = current.dot(&t.rows);
            out.push(current.clone());
        }
        out
    }

    /// Product of all transitions, `q(x1 | x0)`.
    pub fn end_to_end(&self) -> Array2<f64> {
        let k = self.space.num_states();
        self.transitions
            .iter()
            .fold(Array2::eye(k), |acc, t| acc.dot(&t.rows))
    }
}

fn kl_views(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 && b <= 0.0 {
            return Err(Error::SupportMismatch { index: i });
        }
        total += xlogy_ratio(a, b);
    }
    Ok(total.max(0.0))
}

/// `KL(p || q)` with `0 log 0 = 0`.
pub fn kl_distributions(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<f64> {
    if p.space != q.space {
        return Err(Error::SpaceMismatch);
    }
    kl_views(p.as_slice(), q.as_slice())
}

/// KL divergence between slices of equal length, for internal tables.
pub fn kl_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::SpaceMismatch);
    }
    kl_views(p, q)
}

/// `KL(a || b)` over the `(x0, x1)` index set.
pub fn kl_couplings(a: &Coupling, b: &Coupling) -> Result<f64> {
    if a.space != b.space {
        return Err(Error::SpaceMismatch);
    }
    let mut total = 0.0;
    for (i, (&x, &y)) in a.probs.iter().zip(b.probs.iter()).enumerate() {
        if x > 0.0 && y <= 0.0 {
            return Err(Error::SupportMismatch { index: i });
        }
        total += xlogy_ratio(x, y);
    }
    Ok(total.max(0.0))
}

/// Total variation `½ Σ |p - q|`.
pub fn tv_distance(p: &CategoricalDistribution, q: &CategoricalDistribution) -> Result<f64> {
    if p.space != q.space {
        return Err(Error::SpaceMismatch);
    }
    Ok(tv_slices(p.as_slice(), q.as_slice()))
}

pub fn tv_slices(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Total variation between two couplings.
pub fn tv_couplings(a: &Coupling, b: &Coupling) -> Result<f64> {
    if a.space != b.space {
        return Err(Error::SpaceMismatch);
    }
    Ok(0.5 * a.probs.iter().zip(b.probs.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Row sums and column sums of a coupling.
pub fn coupling_marginals(c: &Coupling) -> (CategoricalDistribution, CategoricalDistribution) {
    let rows = c.probs.sum_axis(Axis(1));
    let cols = c.probs.sum_axis(Axis(0));
    (
        CategoricalDistribution {
            space: c.space,
            probs: rows,
        },
        CategoricalDistribution {
            space: c.space,
            probs: cols,
        },
    )
}

/// Shannon entropy `-Σ c log c` of a coupling.
pub fn entropy(c: &Coupling) -> f64 {
    -c.probs
        .iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(s: usize) -> StateSpace {
        StateSpace::line(s).unwrap()
    }

    fn dist(v: &[f64]) -> CategoricalDistribution {
        CategoricalDistribution::new(line(v.len()), Array1::from_vec(v.to_vec())).unwrap()
    }

    fn random_coupling(s: usize, rng: &mut ChaCha8Rng) -> Coupling {
        let w = Array2::from_shape_fn((s, s), |_| rng.random::<f64>() + 0.01);
        Coupling::from_weights(line(s), w).unwrap()
    }

    #[test]
    fn validation() {
        assert!(CategoricalDistribution::new(line(2), array![0.5, 0.6]).is_err());
        assert!(CategoricalDistribution::new(line(2), array![-0.1, 1.1]).is_err());
        assert!(CategoricalDistribution::new(line(3), array![0.5, 0.5]).is_err());
        assert!(TransitionMatrix::new(array![[0.5, 0.5], [1.0, 0.1]]).is_err());
        let d = CategoricalDistribution::with_full_support(line(2), array![1.0, 0.0], 1e-300);
        assert!(matches!(d, Err(Error::SupportViolation(1))));
    }

    #[test]
    fn kl_examples() {
        let half = dist(&[0.5, 0.5]);
        assert_eq!(kl_distributions(&half, &half).unwrap(), 0.0);
        let v = kl_distributions(&dist(&[1.0, 0.0]), &half).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        // Frozen from a 30-digit summation.
        let v = kl_distributions(&dist(&[0.3, 0.7]), &dist(&[0.6, 0.4])).unwrap();
        assert!((v - 0.183_786_897_386_812_29).abs() < 1e-15);
    }

    #[test]
    fn kl_errors() {
        let r = kl_distributions(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0]));
        assert!(matches!(r, Err(Error::SupportMismatch { index: 1 })));
        let r = kl_distributions(&dist(&[0.5, 0.5]), &dist(&[0.2, 0.3, 0.5]));
        assert!(matches!(r, Err(Error::SpaceMismatch)));
    }

    #[test]
    fn kl_coupling_examples() {
        let u = Coupling::new(line(2), Array2::from_elem((2, 2), 0.25)).unwrap();
        assert_eq!(kl_couplings(&u, &u).unwrap(), 0.0);
        let d = Coupling::diagonal(&dist(&[0.5, 0.5]));
        assert!((kl_couplings(&d, &u).unwrap() - 2f64.ln()).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_coupling(3, &mut rng);
        let b = random_coupling(3, &mut rng);
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let (x, y) = (a.probs()[[i, j]], b.probs()[[i, j]]);
                oracle += x * (x.ln() - y.ln());
            }
        }
        assert!((kl_couplings(&a, &b).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn tv_examples() {
        let p = dist(&[0.3, 0.7]);
        assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        assert_eq!(tv_distance(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap(), 1.0);
        assert!((tv_distance(&p, &dist(&[0.6, 0.4])).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn marginals_of_structured_couplings() {
        let p = dist(&[0.2, 0.3, 0.5]);
        let q = dist(&[0.6, 0.1, 0.3]);
        let (a, b) = coupling_marginals(&Coupling::product(&p, &q).unwrap());
        assert!(tv_distance(&a, &p).unwrap() < 1e-15);
        assert!(tv_distance(&b, &q).unwrap() < 1e-15);
        let (a, b) = coupling_marginals(&Coupling::diagonal(&p));
        assert_eq!(a, p);
        assert_eq!(b, p);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = random_coupling(4, &mut rng);
        let (rows, cols) = coupling_marginals(&c);
        for i in 0..4 {
            let mut r = 0.0;
            let mut s = 0.0;
            for j in 0..4 {
                r += c.probs()[[i, j]];
                s += c.probs()[[j, i]];
            }
            assert!((rows.prob(i) - r).abs() < 1e-15);
            assert!((cols.prob(i) - s).abs() < 1e-15);
        }
    }

    #[test]
    fn entropy_examples() {
        let point = Coupling::diagonal(&dist(&[1.0, 0.0]));
        assert_eq!(entropy(&point), 0.0);
        let u = Coupling::new(line(3), Array2::from_elem((3, 3), 1.0 / 9.0)).unwrap();
        assert!((entropy(&u) - 9f64.ln()).abs() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_coupling(3, &mut rng);
        let oracle: f64 = c.probs().iter().map(|p| -p * p.ln()).sum();
        assert!((entropy(&c) - oracle).abs() < 1e-12);
    }

    #[test]
    fn chain_marginals_and_end_to_end() {
        let t = TransitionMatrix::new(array![[0.9, 0.1], [0.2, 0.8]]).unwrap();
        let chain = MarkovChainProcess::new(TimeGrid::new(1), dist(&[0.5, 0.5]), vec![t.clone(), t])
            .unwrap();
        let m = chain.time_marginals();
        assert_eq!(m.len(), 3);
        assert!((m[1][0] - 0.55).abs() < 1e-15);
        let e = chain.end_to_end();
        assert!((e[[0, 0]] - (0.81 + 0.02)).abs() < 1e-15);
        assert!(MarkovChainProcess::new(TimeGrid::new(3), dist(&[0.5, 0.5]), vec![]).is_err());
    }

    fn positive_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01f64..1.0, len)
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_only_on_equality(a in positive_vec(5), b in positive_vec(5)) {
            let p = CategoricalDistribution::from_weights(line(5), Array1::from_vec(a)).unwrap();
            let q = CategoricalDistribution::from_weights(line(5), Array1::from_vec(b)).unwrap();
            let kl = kl_distributions(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!(kl_distributions(&p, &p).unwrap() <= 1e-12);
            if tv_distance(&p, &q).unwrap() > 1e-6 {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn coupling_marginals_are_valid(w in positive_vec(16)) {
            let c = Coupling::from_weights(line(4), Array2::from_shape_vec((4, 4), w).unwrap()).unwrap();
            let (a, b) = coupling_marginals(&c);
            prop_assert!(CategoricalDistribution::new(line(4), a.into_array()).is_ok());
            prop_assert!(CategoricalDistribution::new(line(4), b.into_array()).is_ok());
        }
    }
}
