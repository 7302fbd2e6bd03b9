//! State spaces `S^D` and discrete time grids.
//!
//! States are enumerated row-major over dimensions: the first dimension is the
//! most significant digit of the base-`S` flat index. Every table in the crate
//! shares this enumeration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The space `{0, .., S-1}^D` with its flat enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateSpace {
    num_categories: usize,
    num_dimensions: usize,
    num_states: usize,
}

impl StateSpace {
    pub fn new(num_categories: usize, num_dimensions: usize) -> Result<Self> {
        if num_categories < 2 {
            return Err(Error::InvalidSpace(format!(
                "need at least 2 categories, got {num_categories}"
            )));
        }
        if num_dimensions < 1 {
            return Err(Error::InvalidSpace("need at least 1 dimension".into()));
        }
        let mut num_states: usize = 1;
        for _ in 0..num_dimensions {
            num_states = num_states.checked_mul(num_categories).ok_or_else(|| {
                Error::InvalidSpace(format!(
                    "{num_categories}^{num_dimensions} states overflow a machine word"
                ))
            })?;
        }
        Ok(Self {
            num_categories,
            num_dimensions,
            num_states,
        })
    }

    /// One-dimensional space with `S` categories.
    pub fn line(num_categories: usize) -> Result<Self> {
        Self::new(num_categories, 1)
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn num_dimensions(&self) -> usize {
        self.num_dimensions
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    /// Space of a single coordinate of this space.
    pub fn coordinate_space(&self) -> StateSpace {
        StateSpace {
            num_categories: self.num_categories,
            num_dimensions: 1,
            num_states: self.num_categories,
        }
    }

    pub fn contains(&self, state: usize) -> bool {
        state < self.num_states
    }

    pub fn check(&self, state: usize) -> Result<()> {
        if self.contains(state) {
            Ok(())
        } else {
            Err(Error::StateIndex(state))
        }
    }

    /// Flat index of a multi-index. Panics if a coordinate is out of range.
    pub fn flatten(&self, coords: &[usize]) -> usize {
        assert_eq!(coords.len(), self.num_dimensions, "wrong number of coordinates");
        coords.iter().fold(0, |acc, &c| {
            assert!(c < self.num_categories, "coordinate {c} out of range");
            acc * self.num_categories + c
        })
    }

    /// Multi-index of a flat state.
    pub fn unflatten(&self, state: usize) -> Vec<usize> {
        let mut coords = vec![0; self.num_dimensions];
        self.unflatten_into(state, &mut coords);
        coords
    }

    pub fn unflatten_into(&self, mut state: usize, coords: &mut [usize]) {
        debug_assert_eq!(coords.len(), self.num_dimensions);
        for c in coords.iter_mut().rev() {
            *c = state % self.num_categories;
            state /= self.num_categories;
        }
    }

    /// Coordinate `d` of a flat state.
    pub fn coordinate(&self, state: usize, d: usize) -> usize {
        let shift = self.num_dimensions - 1 - d;
        (state / self.num_categories.pow(shift as u32)) % self.num_categories
    }
}

/// `N` intermediate moments between `t_0 = 0` and `t_{N+1} = 1`.
///
/// Only indices matter; the physical times are never used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeGrid {
    num_intermediate: usize,
}

impl TimeGrid {
    pub fn new(num_intermediate: usize) -> Self {
        Self { num_intermediate }
    }

    pub fn num_intermediate(&self) -> usize {
        self.num_intermediate
    }

    /// Number of one-step transitions, `N + 1`.
    pub fn num_transitions(&self) -> usize {
        self.num_intermediate + 1
    }

    /// Index of the terminal moment, `N + 1`.
    pub fn terminal(&self) -> usize {
        self.num_intermediate + 1
    }
}
