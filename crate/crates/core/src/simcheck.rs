//! Functional model of tiled crossbar matrix-vector products.

use serde::Serialize;

use crate::energy::AdcProfile;
use crate::error::{Error, Result};
use crate::prune::PruneMask;
use crate::tiling::TileGrid;

/// Column partial sums produced by one tile.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TilePartial {
    pub tile: usize,
    pub block_row: usize,
    pub block_col: usize,
    pub sums: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TiledMvmTrace {
    pub partials: Vec<TilePartial>,
    /// Tile indices in the order their partials were accumulated.
    pub accumulation_order: Vec<usize>,
    pub output: Vec<f64>,
}

fn tile_mask(grid: &TileGrid, mask: Option<&PruneMask>, t: usize) -> Option<Vec<f64>> {
    mask.map(|mk| {
        let n = grid.tile_size();
        (0..n * n)
            .map(|i| match grid.layout.matrix_index(t, i / n, i % n) {
                Some(idx) if mk.keep(idx) => 1.0,
                _ => 0.0,
            })
            .collect()
    })
}

fn check_mask(grid: &TileGrid, mask: Option<&PruneMask>) -> Result<()> {
    if let Some(mk) = mask {
        if mk.rows() != grid.layout.rows || mk.cols() != grid.layout.cols {
            return Err(Error::Dimension(format!(
                "mask {}x{} vs grid {}x{}",
                mk.rows(),
                mk.cols(),
                grid.layout.rows,
                grid.layout.cols
            )));
        }
    }
    Ok(())
}

/// `(masked matrix)^T x`, computed tile by tile and accumulated in
/// row-major tile order. Padded rows see a zero input.
pub fn tiled_mvm(grid: &TileGrid, mask: Option<&PruneMask>, x: &[f64]) -> Result<TiledMvmTrace> {
    check_mask(grid, mask)?;
    if x.len() != grid.layout.rows {
        return Err(Error::Dimension(format!(
            "input has length {}, matrix height is {}",
            x.len(),
            grid.layout.rows
        )));
    }
    let n = grid.tile_size();
    let mut output = vec![0.0; grid.layout.cols];
    let mut partials = Vec::with_capacity(grid.len());
    let mut order = Vec::with_capacity(grid.len());
    for tile in &grid.tiles {
        let (br, bc) = grid.layout.block(tile.index);
        let m = tile_mask(grid, mask, tile.index);
        let mut sums = vec![0.0; n];
        for r in 0..tile.valid_rows {
            let xi = x[br * n + r];
            for (c, s) in sums.iter_mut().enumerate() {
                let mut w = tile.values[r * n + c];
                if let Some(m) = &m {
                    w *= m[r * n + c];
                }
                *s += w * xi;
            }
        }
        for c in 0..tile.valid_cols {
            output[bc * n + c] += sums[c];
        }
        order.push(tile.index);
        partials.push(TilePartial {
            tile: tile.index,
            block_row: br,
            block_col: bc,
            sums,
        });
    }
    Ok(TiledMvmTrace {
        partials,
        accumulation_order: order,
        output,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundViolation {
    pub tile: usize,
    pub column: usize,
    pub active_cells: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdcBoundReport {
    pub tiles_checked: usize,
    pub violations: Vec<BoundViolation>,
}

impl AdcBoundReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks, with binary weights and an all-ones input, that no column's
/// count of active cells exceeds the per-column budget of its tile's level.
pub fn check_adc_bound(
    grid: &TileGrid,
    mask: Option<&PruneMask>,
    profile: &AdcProfile,
) -> Result<AdcBoundReport> {
    check_mask(grid, mask)?;
    if profile.tile_count() != grid.len() || profile.tile_size != grid.tile_size() {
        return Err(Error::Dimension(format!(
            "profile covers {} tiles of size {}, grid has {} of size {}",
            profile.tile_count(),
            profile.tile_size,
            grid.len(),
            grid.tile_size()
        )));
    }
    let n = grid.tile_size();
    let mut violations = Vec::new();
    for (tile, adc) in grid.tiles.iter().zip(&profile.tiles) {
        let m = tile_mask(grid, mask, tile.index);
        let budget = adc.level.keep(n);
        for c in 0..n {
            let active = (0..n)
                .filter(|&r| {
                    let live = m.as_ref().is_none_or(|m| m[r * n + c] != 0.0);
                    live && tile.values[r * n + c] != 0.0
                })
                .count();
            if active > budget {
                violations.push(BoundViolation {
                    tile: tile.index,
                    column: c,
                    active_cells: active,
                    budget,
                });
            }
        }
    }
    Ok(AdcBoundReport {
        tiles_checked: grid.len(),
        violations,
    })
}
