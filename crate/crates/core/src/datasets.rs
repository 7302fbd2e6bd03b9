//! Marginals and samplers for the one- and two-dimensional experiments.

use std::io::{Read, Write};

use ndarray::Array1;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::CategoricalDistribution;
use crate::space::StateSpace;

/// Uniform `p0` and linearly increasing `p1(s) ∝ s + 1` on `S` categories.
pub fn marginals_linear(num_categories: usize) -> Result<(CategoricalDistribution, CategoricalDistribution)> {
    let space = StateSpace::line(num_categories)?;
    let total = (num_categories * (num_categories + 1) / 2) as f64;
    let p1 = Array1::from_shape_fn(num_categories, |s| (s + 1) as f64 / total);
    Ok((CategoricalDistribution::uniform(space), CategoricalDistribution::new(space, p1)?))
}

/// Square grid over a box in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec2D {
    #[serde(rename = "S")]
    pub num_categories: usize,
    pub min: f64,
    pub max: f64,
}

impl Default for GridSpec2D {
    fn default() -> Self {
        Self {
            num_categories: 50,
            min: -5.0,
            max: 5.0,
        }
    }
}

impl GridSpec2D {
    pub fn new(num_categories: usize, min: f64, max: f64) -> Result<Self> {
        let spec = Self { num_categories, min, max };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_categories < 2 {
            return Err(Error::InvalidSpace(format!("grid needs S >= 2, got {}", self.num_categories)));
        }
        if !(self.min.is_finite() && self.max.is_finite() && self.max > self.min) {
            return Err(Error::InvalidSpace(format!("degenerate box [{}, {}]", self.min, self.max)));
        }
        Ok(())
    }

    pub fn space(&self) -> StateSpace {
        StateSpace::new(self.num_categories, 2).expect("validated grid")
    }

    pub fn cell_width(&self) -> f64 {
        (self.max - self.min) / self.num_categories as f64
    }

    /// Cell index of a coordinate, clamped to the grid.
    pub fn cell(&self, x: f64) -> usize {
        let k = ((x - self.min) / self.cell_width()).floor();
        if k.is_nan() || k < 0.0 {
            0
        } else {
            (k as usize).min(self.num_categories - 1)
        }
    }

    pub fn cell_center(&self, k: usize) -> f64 {
        self.min + (k as f64 + 0.5) * self.cell_width()
    }

    /// Flat state of a point.
    pub fn state(&self, x: f64, y: f64) -> usize {
        self.space().flatten(&[self.cell(x), self.cell(y)])
    }

    /// Masses of `N(mean, std²)` in each cell, with both tails folded into the edge cells.
    fn normal_cell_masses(&self, mean: f64, std: f64, out: &mut [f64]) {
        let s = self.num_categories;
        let w = self.cell_width();
        let mut prev = 0.0;
        for (k, slot) in out.iter_mut().enumerate() {
            let upper = if k + 1 == s { 1.0 } else { normal_cdf((self.min + (k + 1) as f64 * w - mean) / std) };
            *slot = (upper - prev).max(0.0);
            prev = upper;
        }
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Swiss-roll curve `t (cos t, sin t)` for `t` uniform in `[t_min, t_max]`
/// (in multiples of π), scaled so the outer end sits at `radius_frac` of the
/// box half-width, plus isotropic Gaussian noise with standard deviation
/// `noise_frac` of the box width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwissRollParams {
    pub t_min_pi: f64,
    pub t_max_pi: f64,
    pub radius_frac: f64,
    pub noise_frac: f64,
}

impl Default for SwissRollParams {
    fn default() -> Self {
        Self {
            t_min_pi: 1.5,
            t_max_pi: 4.5,
            radius_frac: 0.9,
            noise_frac: 0.02,
        }
    }
}

impl SwissRollParams {
    fn curve(&self, spec: &GridSpec2D, u: f64) -> (f64, f64) {
        let pi = std::f64::consts::PI;
        let t = pi * (self.t_min_pi + (self.t_max_pi - self.t_min_pi) * u);
        let half = 0.5 * (spec.max - spec.min);
        let center = 0.5 * (spec.max + spec.min);
        let scale = self.radius_frac * half / (pi * self.t_max_pi);
        (center + scale * t * t.cos(), center + scale * t * t.sin())
    }

    fn noise(&self, spec: &GridSpec2D) -> f64 {
        self.noise_frac * (spec.max - spec.min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toy2dKind {
    Gaussian,
    SwissRoll,
}

/// Discretized draws from a standard 2D normal centred on the box.
pub fn sample_gaussian_2d<R: Rng + ?Sized>(spec: &GridSpec2D, n: usize, rng: &mut R) -> Vec<usize> {
    let center = 0.5 * (spec.max + spec.min);
    (0..n)
        .map(|_| {
            let x: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            spec.state(center + x, center + y)
        })
        .collect()
}

/// Discretized draws from a noisy swiss roll.
pub fn sample_swiss_roll_2d<R: Rng + ?Sized>(
    spec: &GridSpec2D,
    params: &SwissRollParams,
    n: usize,
    rng: &mut R,
) -> Vec<usize> {
    let sigma = params.noise(spec);
    (0..n)
        .map(|_| {
            let (cx, cy) = params.curve(spec, rng.random::<f64>());
            let x: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            spec.state(cx + sigma * x, cy + sigma * y)
        })
        .collect()
}

/// Cell masses of the standard normal on the grid.
pub fn gaussian_grid_marginal(spec: &GridSpec2D) -> Result<CategoricalDistribution> {
    spec.validate()?;
    let s = spec.num_categories;
    let mut m = vec![0.0; s];
    spec.normal_cell_masses(0.5 * (spec.max + spec.min), 1.0, &mut m);
    let probs = Array1::from_shape_fn(s * s, |idx| m[idx / s] * m[idx % s]);
    CategoricalDistribution::from_weights(spec.space(), probs)
}

/// Number of curve nodes used by `swiss_roll_grid_marginal`.
pub const SWISS_ROLL_QUADRATURE_NODES: usize = 4000;

/// Cell masses of the noisy swiss roll, integrating the curve parameter by
/// the midpoint rule and the noise exactly per cell.
pub fn swiss_roll_grid_marginal(spec: &GridSpec2D, params: &SwissRollParams) -> Result<CategoricalDistribution> {
    spec.validate()?;
    let s = spec.num_categories;
    let sigma = params.noise(spec);
    let mut probs = Array1::zeros(s * s);
    let (mut mx, mut my) = (vec![0.0; s], vec![0.0; s]);
    let nodes = SWISS_ROLL_QUADRATURE_NODES;
    for q in 0..nodes {
        let (cx, cy) = params.curve(spec, (q as f64 + 0.5) / nodes as f64);
        spec.normal_cell_masses(cx, sigma, &mut mx);
        spec.normal_cell_masses(cy, sigma, &mut my);
        for (i, &a) in mx.iter().enumerate() {
            if a < 1e-300 {
                continue;
            }
            for (j, &b) in my.iter().enumerate() {
                probs[i * s + j] += a * b;
            }
        }
    }
    CategoricalDistribution::from_weights(spec.space(), probs)
}

/// Normalized histogram of flat state indices.
pub fn empirical_marginal(samples: &[usize], space: StateSpace) -> Result<CategoricalDistribution> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut counts = Array1::zeros(space.num_states());
    for &x in samples {
        space.check(x)?;
        counts[x] += 1.0;
    }
    counts /= samples.len() as f64;
    CategoricalDistribution::new(space, counts)
}

/// Source of flat state indices.
pub trait StateSampler: Send + Sync {
    fn space(&self) -> StateSpace;
    fn sample_state(&self, rng: &mut dyn RngCore) -> usize;

    fn sample_many(&self, n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
        (0..n).map(|_| self.sample_state(rng)).collect()
    }
}

/// Inverse-CDF sampler for an explicit distribution.
#[derive(Debug, Clone)]
pub struct CategoricalSampler {
    space: StateSpace,
    cdf: Vec<f64>,
}

impl CategoricalSampler {
    pub fn new(dist: &CategoricalDistribution) -> Self {
        let mut acc = 0.0;
        let cdf = dist
            .as_slice()
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self { space: dist.space(), cdf }
    }
}

impl StateSampler for CategoricalSampler {
    fn space(&self) -> StateSpace {
        self.space
    }

    fn sample_state(&self, rng: &mut dyn RngCore) -> usize {
        let u = rng.random::<f64>() * self.cdf.last().copied().unwrap_or(1.0);
        self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1)
    }
}

/// Fresh continuous draws, discretized on the grid.
#[derive(Debug, Clone, Copy)]
pub struct Toy2dSampler {
    pub spec: GridSpec2D,
    pub kind: Toy2dKind,
    pub roll: SwissRollParams,
}

impl Toy2dSampler {
    pub fn exact_marginal(&self) -> Result<CategoricalDistribution> {
        match self.kind {
            Toy2dKind::Gaussian => gaussian_grid_marginal(&self.spec),
            Toy2dKind::SwissRoll => swiss_roll_grid_marginal(&self.spec, &self.roll),
        }
    }
}

impl StateSampler for Toy2dSampler {
    fn space(&self) -> StateSpace {
        self.spec.space()
    }

    fn sample_state(&self, rng: &mut dyn RngCore) -> usize {
        match self.kind {
            Toy2dKind::Gaussian => sample_gaussian_2d(&self.spec, 1, rng)[0],
            Toy2dKind::SwissRoll => sample_swiss_roll_2d(&self.spec, &self.roll, 1, rng)[0],
        }
    }
}

/// Writes one sample per row as its coordinates `d0,d1,...`.
pub fn write_samples_csv<W: Write>(space: StateSpace, samples: &[usize], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header: Vec<String> = (0..space.num_dimensions()).map(|d| format!("d{d}")).collect();
    w.write_record(&header)?;
    let mut coords = vec![0; space.num_dimensions()];
    for &x in samples {
        space.check(x)?;
        space.unflatten_into(x, &mut coords);
        w.write_record(coords.iter().map(|c| c.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads samples written by `write_samples_csv`.
pub fn read_samples_csv<R: Read>(space: StateSpace, input: R) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    let mut coords = Vec::with_capacity(space.num_dimensions());
    for record in r.records() {
        let record = record?;
        if record.len() != space.num_dimensions() {
            return Err(Error::InvalidConfig(format!(
                "sample row has {} fields, expected {}",
                record.len(),
                space.num_dimensions()
            )));
        }
        coords.clear();
        for field in record.iter() {
            let c: usize = field
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad coordinate {field:?}")))?;
            if c >= space.num_categories() {
                return Err(Error::StateIndex(c));
            }
            coords.push(c);
        }
        out.push(space.flatten(&coords));
    }
    Ok(out)
}
