//! Exact Schrödinger bridges on finite categorical spaces.
//!
//! The crate builds discrete-time reference Markov chains, computes their
//! bridges in closed form, runs exact iterative Markovian fitting against a
//! Sinkhorn ground truth, and trains tabular endpoint models with the
//! categorical bridge-matching procedure.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod csbm;
pub mod datasets;
pub mod dimf;
pub mod eot;
pub mod error;
pub mod numeric;
pub mod prob;
pub mod projections;
pub mod reference;
pub mod rng;
pub mod space;

pub use error::{Error, Result};
