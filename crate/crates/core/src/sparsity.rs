//! Column sparsity measures and tile distributions.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::levels::{Level, SparsityLevelSet};
use crate::tiling::{Tile, TileGrid};

/// Guard added to the squared L2 norm in Hoyer-Square.
pub const HOYER_EPS: f64 = 1e-12;

/// Number of entries that are not exactly zero.
pub fn l0_count(w: &[f64]) -> usize {
    w.iter().filter(|&&v| v != 0.0).count()
}

fn norms(w: &[f64]) -> (f64, f64) {
    w.iter()
        .fold((0.0, 0.0), |(l1, l2), &v| (l1 + v.abs(), l2 + v * v))
}

/// Hoyer-Square `(sum |w|)^2 / sum w^2`, a differentiable stand-in for L0.
pub fn hoyer_square(w: &[f64]) -> f64 {
    let (l1, l2sq) = norms(w);
    if l2sq == 0.0 {
        return 0.0;
    }
    l1 * l1 / (l2sq + HOYER_EPS)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of [`hoyer_square`]; `sign(0) = 0`.
pub fn hoyer_square_grad(w: &[f64]) -> Vec<f64> {
    let (l1, l2sq) = norms(w);
    if l2sq == 0.0 {
        return vec![0.0; w.len()];
    }
    let denom = l2sq + HOYER_EPS;
    let a = 2.0 * l1 / denom;
    let b = 2.0 * l1 * l1 / (denom * denom);
    w.iter().map(|&v| a * sign(v) - b * v).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ColumnStat {
    pub l0: usize,
    pub hoyer_square: f64,
    pub sparsity_fraction: f64,
}

impl ColumnStat {
    pub fn of(w: &[f64]) -> Self {
        let l0 = l0_count(w);
        ColumnStat {
            l0,
            hoyer_square: hoyer_square(w),
            sparsity_fraction: (w.len() - l0) as f64 / w.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TileStat {
    pub columns: Vec<ColumnStat>,
    pub lsc_index: usize,
    pub lsc_sparsity: f64,
    pub mean_hoyer: f64,
}

impl TileStat {
    pub fn max_nnz(&self) -> usize {
        self.columns[self.lsc_index].l0
    }
}

/// Per-column statistics of a tile; padded cells read as zeros.
pub fn tile_stats(tile: &Tile) -> TileStat {
    let columns: Vec<ColumnStat> = tile.columns().map(|c| ColumnStat::of(&c.weights)).collect();
    // lowest index wins ties
    let mut lsc_index = 0;
    for (c, stat) in columns.iter().enumerate() {
        if stat.l0 > columns[lsc_index].l0 {
            lsc_index = c;
        }
    }
    let mean_hoyer = columns.iter().map(|c| c.hoyer_square).sum::<f64>() / columns.len() as f64;
    TileStat {
        lsc_sparsity: columns[lsc_index].sparsity_fraction,
        lsc_index,
        mean_hoyer,
        columns,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBucket {
    pub level_label: String,
    pub min_sparsity: f64,
    pub tile_count: usize,
    pub tile_fraction: f64,
}

/// Tiles bucketed by the discretized level their least sparse column reaches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TileHistogram {
    pub tile_size: usize,
    pub total_tiles: usize,
    pub buckets: Vec<HistogramBucket>,
}

impl TileHistogram {
    /// Fraction of tiles whose LSC sparsity is at least `s`.
    pub fn fraction_at_least(&self, s: f64) -> f64 {
        self.buckets
            .iter()
            .filter(|b| b.min_sparsity >= s)
            .map(|b| b.tile_fraction)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["level_label", "min_sparsity", "tile_count", "tile_fraction"])?;
        for b in &self.buckets {
            w.write_record([
                b.level_label.clone(),
                b.min_sparsity.to_string(),
                b.tile_count.to_string(),
                b.tile_fraction.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn bucket_label(level: Level) -> String {
    match level {
        Level::Reduced(0) => "<50%".to_string(),
        other => format!("{}%", other.sparsity() * 100.0),
    }
}

/// Tile distribution over all grids, which must share one tile size.
pub fn histogram(grids: &[TileGrid]) -> Result<TileHistogram> {
    let tile_size = grids
        .first()
        .map(|g| g.tile_size())
        .ok_or_else(|| Error::InvalidArgument("histogram of zero grids".into()))?;
    if let Some(g) = grids.iter().find(|g| g.tile_size() != tile_size) {
        return Err(Error::InvalidArgument(format!(
            "grid '{}' uses tile size {}, expected {tile_size}",
            g.name,
            g.tile_size()
        )));
    }
    let set = SparsityLevelSet::new(tile_size)?;
    let mut counts = vec![0usize; set.levels().len()];
    let mut total = 0;
    for tile in grids.iter().flat_map(|g| &g.tiles) {
        let level = set.level_for_max_nnz(tile_stats(tile).max_nnz());
        let idx = set.levels().iter().position(|&l| l == level).expect("level in set");
        counts[idx] += 1;
        total += 1;
    }
    let buckets = set
        .levels()
        .iter()
        .zip(counts)
        .map(|(&level, count)| HistogramBucket {
            level_label: bucket_label(level),
            min_sparsity: level.sparsity(),
            tile_count: count,
            tile_fraction: if total == 0 {
                0.0
            } else {
                count as f64 / total as f64
            },
        })
        .collect();
    Ok(TileHistogram {
        tile_size,
        total_tiles: total,
        buckets,
    })
}
