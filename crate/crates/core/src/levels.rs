//! ADC-attuned discretized sparsity levels.
//!
//! Cutting `x` bits from a tile's ADC requires its least sparse column to
//! reach sparsity `1 - 2^-x`, i.e. keep at most `n * 2^-x` nonzeros. The
//! extra level 1.0 stands for a fully removed tile.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tiling::check_tile_size;

/// Sparsity fraction needed to remove `bits` bits of ADC precision.
pub fn target_sparsity(bits: u32) -> f64 {
    1.0 - 0.5f64.powi(bits as i32)
}

/// A discretized tile level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// `x` bits of ADC precision removed.
    Reduced(u32),
    /// Every weight pruned.
    Removed,
}

impl Level {
    pub fn sparsity(self) -> f64 {
        match self {
            Level::Reduced(x) => target_sparsity(x),
            Level::Removed => 1.0,
        }
    }

    /// Per-column nonzero budget in a tile of size `n`.
    pub fn keep(self, tile_size: usize) -> usize {
        match self {
            Level::Reduced(x) => tile_size >> x,
            Level::Removed => 0,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::Reduced(x) => write!(f, "x={x}"),
            Level::Removed => f.write_str("removed"),
        }
    }
}

/// All levels available to an `n x n` tile, in increasing sparsity.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityLevelSet {
    tile_size: usize,
    levels: Vec<Level>,
}

impl SparsityLevelSet {
    pub fn new(tile_size: usize) -> Result<Self> {
        check_tile_size(tile_size)?;
        let max_bits = tile_size.trailing_zeros();
        let mut levels: Vec<Level> = (0..=max_bits).map(Level::Reduced).collect();
        levels.push(Level::Removed);
        Ok(SparsityLevelSet { tile_size, levels })
    }

    pub fn tile_size(&self) -> usize {
        self.tile_size
    }

    /// Full ADC precision, `log2 n`.
    pub fn full_bits(&self) -> u32 {
        self.tile_size.trailing_zeros()
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn sparsities(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.sparsity()).collect()
    }

    pub fn contains_sparsity(&self, s: f64) -> bool {
        self.levels.iter().any(|l| l.sparsity() == s)
    }

    /// Level nearest to `s`; equidistant candidates resolve to the sparser one.
    pub fn closest(&self, s: f64) -> Level {
        let mut best = self.levels[0];
        let mut best_dist = (best.sparsity() - s).abs();
        for &level in &self.levels[1..] {
            let d = (level.sparsity() - s).abs();
            if d <= best_dist {
                best = level;
                best_dist = d;
            }
        }
        best
    }

    /// Sparsest level whose per-column budget admits `max_nnz` nonzeros.
    pub fn level_for_max_nnz(&self, max_nnz: usize) -> Level {
        if max_nnz == 0 {
            return Level::Removed;
        }
        let mut x = 0;
        while x < self.full_bits() && max_nnz <= self.tile_size >> (x + 1) {
            x += 1;
        }
        Level::Reduced(x)
    }

    /// ADC bits needed at `level`; zero for the last two levels.
    pub fn bits(&self, level: Level) -> u32 {
        match level {
            Level::Reduced(x) => self.full_bits().saturating_sub(x),
            Level::Removed => 0,
        }
    }
}
