use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state space: {0}")]
    InvalidSpace(String),

    #[error("objects live on different state spaces")]
    SpaceMismatch,

    #[error("support mismatch: first argument has mass where the second has none (index {index})")]
    SupportMismatch { index: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("stochasticity parameter alpha = {alpha} is out of range for the {kind} reference")]
    AlphaOutOfRange { kind: &'static str, alpha: f64 },

    #[error("reference with alpha = {alpha} does not have full support")]
    AlphaDegenerate { alpha: f64 },

    #[error("time indices out of order or out of range: a = {a}, b = {b}")]
    IndexOrder { a: usize, b: usize },

    #[error("time index {n} outside the valid range {lo}..={hi}")]
    TimeIndex { n: usize, lo: usize, hi: usize },

    #[error("state index {0} is outside the state space")]
    StateIndex(usize),

    #[error("reference assigns zero mass to every path from {from} to {to}")]
    ZeroMassPath { from: usize, to: usize },

    #[error("state {state} has zero marginal mass at time index {time}")]
    ZeroMarginal { time: usize, state: usize },

    #[error("reciprocal processes use different reference processes")]
    ReferenceMismatch,

    #[error("marginal lacks full support (state {0} has zero mass)")]
    SupportViolation(usize),

    #[error("KL to target increased from {previous:e} to {current:e} at iteration {iteration}")]
    NonDecreaseDetected {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("enumeration of {count} paths exceeds the limit of {limit}")]
    EnumerationTooLarge { count: u128, limit: u128 },

    #[error("Sinkhorn did not converge in {iterations} iterations (marginal error {error:e})")]
    NoConvergence { iterations: usize, error: f64 },

    #[error("cumulative reference transition has a zero entry at ({from}, {to})")]
    ZeroTransition { from: usize, to: usize },

    #[error("batch sizes differ: {left} vs {right}")]
    BatchMismatch { left: usize, right: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
