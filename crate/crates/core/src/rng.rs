//! Seed splitting.
//!
//! A single global seed fans out to independent ChaCha8 streams: the global
//! seed is the ChaCha key and each component owns a fixed stream id. Work
//! items inside a component derive their own generator from the component's
//! stream by drawing a fresh 64-bit seed, which keeps results independent of
//! thread scheduling.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod streams {
    pub const DATA_P0: u64 = 1;
    pub const DATA_P1: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const VERIFY: u64 = 5;
    pub const OPTIMALITY: u64 = 6;
}

/// Generator for component `stream` under global `seed`.
pub fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator for a work item, seeded from its parent stream.
pub fn child_rng<R: RngCore + ?Sized>(parent: &mut R) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(parent.next_u64())
}
