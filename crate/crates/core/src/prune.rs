//! Pruning: per-tile discretized pruning and the magnitude/structured baselines.
//!
//! Per-tile pruning finds, for each tile, the column with the fewest weights
//! identified by the layer threshold (the least sparse column), rounds its
//! identified sparsity to the closest discretized level, and then keeps the
//! same number of largest-magnitude weights in every column of the tile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::levels::{Level, SparsityLevelSet};
use crate::regularize::{group_indices, Grouping};
use crate::sparsity::tile_stats;
use crate::tiling::{partition, LayerMatrix, Tile, TileLayout};

pub use crate::levels::target_sparsity;

/// How a mask was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Dense,
    Unstructured,
    Dub,
    Column,
    Row,
    Tile,
    Sdub,
}

impl Provenance {
    pub fn code(self) -> u8 {
        match self {
            Provenance::Dense => 0,
            Provenance::Unstructured => 1,
            Provenance::Dub => 2,
            Provenance::Column => 3,
            Provenance::Row => 4,
            Provenance::Tile => 5,
            Provenance::Sdub => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        use Provenance::*;
        [Dense, Unstructured, Dub, Column, Row, Tile, Sdub].get(code as usize).copied()
    }
}

impl From<Grouping> for Provenance {
    fn from(g: Grouping) -> Self {
        match g {
            Grouping::Column => Provenance::Column,
            Grouping::Row => Provenance::Row,
            Grouping::Tile => Provenance::Tile,
        }
    }
}

/// Binary keep-mask congruent with a layer matrix; `false` means pruned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
    pub provenance: Provenance,
}

impl PruneMask {
    pub fn ones(rows: usize, cols: usize) -> Self {
        PruneMask {
            rows,
            cols,
            bits: vec![true; rows * cols],
            provenance: Provenance::Dense,
        }
    }

    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), rows * cols, "mask size");
        PruneMask {
            rows,
            cols,
            bits,
            provenance: Provenance::Dense,
        }
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn keep(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn pruned(&self) -> usize {
        self.bits.len() - self.kept()
    }

    pub fn pruned_fraction(&self) -> f64 {
        self.pruned() as f64 / self.bits.len() as f64
    }

    /// Zeroes pruned weights in place.
    pub fn apply(&self, m: &mut LayerMatrix) {
        for (w, &keep) in m.values_mut().iter_mut().zip(&self.bits) {
            if !keep {
                *w = 0.0;
            }
        }
    }

    /// Elementwise AND; the result carries `self`'s provenance.
    pub fn intersect(&self, other: &PruneMask) -> PruneMask {
        PruneMask {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
            provenance: self.provenance,
        }
    }

    /// Row-major bitset, LSB first within each byte.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack(rows: usize, cols: usize, bytes: &[u8]) -> Self {
        let bits = (0..rows * cols)
            .map(|i| bytes[i / 8] >> (i % 8) & 1 == 1)
            .collect();
        PruneMask::from_bits(rows, cols, bits)
    }
}

fn candidate_magnitudes(m: &LayerMatrix, mask: Option<&PruneMask>) -> Vec<f64> {
    m.values()
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|mk| mk.keep(*i)))
        .map(|(_, w)| w.abs())
        .collect()
}

/// Magnitude threshold leaving `allowed_ratio` of the layer's unmasked
/// weights strictly below it. Weights tied with the threshold are kept.
pub fn layer_threshold(m: &LayerMatrix, mask: Option<&PruneMask>, allowed_ratio: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&allowed_ratio) {
        return Err(Error::InvalidArgument(format!(
            "allowed pruning ratio must lie in [0, 1), got {allowed_ratio}"
        )));
    }
    let mut mags = candidate_magnitudes(m, mask);
    if mags.is_empty() {
        return Err(Error::EmptyLayer(m.name().to_string()));
    }
    if allowed_ratio == 0.0 {
        return Ok(0.0);
    }
    mags.sort_by(f64::total_cmp);
    let idx = ((allowed_ratio * mags.len() as f64 + 1e-9).floor() as usize).min(mags.len() - 1);
    Ok(mags[idx])
}

/// Outcome of pruning one tile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub index: usize,
    pub lsc_index: usize,
    /// Zeros the layer threshold identifies in the least sparse column,
    /// including padding and weights that were already zero.
    pub lsc_identified: usize,
    pub level: Level,
    pub keep: usize,
}

/// Per-tile discretized pruning of one tile.
///
/// `current` is the tile-local keep mask (`None` when unmasked). Returns the
/// plan and the new tile-local keep mask; padding is always `false`.
pub fn prune_tile(
    tile: &Tile,
    current: Option<&[bool]>,
    threshold: f64,
    levels: &SparsityLevelSet,
) -> (TilePlan, Vec<bool>) {
    let n = tile.tile_size;
    debug_assert_eq!(levels.tile_size(), n);
    let live = |r: usize, c: usize| -> bool {
        !tile.is_structural(r, c) && current.is_none_or(|m| m[r * n + c])
    };

    let mut lsc_index = 0;
    let mut lsc_identified = usize::MAX;
    for c in 0..n {
        let identified = (0..n)
            .filter(|&r| {
                let w = tile.get(r, c);
                !live(r, c) || w == 0.0 || w.abs() < threshold
            })
            .count();
        if identified < lsc_identified {
            lsc_identified = identified;
            lsc_index = c;
        }
    }
    let level = levels.closest(lsc_identified as f64 / n as f64);
    let keep = level.keep(n);

    let mut mask = vec![false; n * n];
    let mut rows: Vec<usize> = Vec::with_capacity(n);
    for c in 0..n {
        rows.clear();
        rows.extend((0..n).filter(|&r| live(r, c)));
        rows.sort_by(|&a, &b| {
            tile.get(b, c)
                .abs()
                .total_cmp(&tile.get(a, c).abs())
                .then(a.cmp(&b))
        });
        for &r in rows.iter().take(keep) {
            mask[r * n + c] = true;
        }
    }
    (
        TilePlan {
            index: tile.index,
            lsc_index,
            lsc_identified,
            level,
            keep,
        },
        mask,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub name: String,
    pub allowed_ratio: f64,
    pub threshold: f64,
    pub tiles: Vec<TilePlan>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrunePlan {
    pub tile_size: usize,
    pub layers: Vec<LayerPlan>,
}

fn check_mask(m: &LayerMatrix, mask: Option<&PruneMask>) -> Result<()> {
    if let Some(mk) = mask {
        if mk.rows() != m.rows() || mk.cols() != m.cols() {
            return Err(Error::Dimension(format!(
                "mask {}x{} does not match layer '{}' {}x{}",
                mk.rows(),
                mk.cols(),
                m.name(),
                m.rows(),
                m.cols()
            )));
        }
    }
    Ok(())
}

/// Per-tile discretized pruning of a whole layer with a fixed threshold.
pub fn prune_layer_with_threshold(
    m: &LayerMatrix,
    mask: Option<&PruneMask>,
    threshold: f64,
    tile_size: usize,
) -> Result<(PruneMask, Vec<TilePlan>)> {
    check_mask(m, mask)?;
    let layout = TileLayout::new(m.rows(), m.cols(), tile_size)?;
    let levels = SparsityLevelSet::new(tile_size)?;
    let value_tiles = layout.split(m.values(), 0.0);
    let mask_tiles = mask.map(|mk| layout.split(mk.bits(), false));
    let mut plans = Vec::with_capacity(layout.tile_count());
    let mut new_tiles = Vec::with_capacity(layout.tile_count());
    for (t, values) in value_tiles.into_iter().enumerate() {
        let (valid_rows, valid_cols) = layout.valid_extent(t);
        let tile = Tile {
            index: t,
            tile_size,
            valid_rows,
            valid_cols,
            values,
        };
        let current = mask_tiles.as_ref().map(|mt| mt[t].as_slice());
        let (plan, tile_mask) = prune_tile(&tile, current, threshold, &levels);
        plans.push(plan);
        new_tiles.push(tile_mask);
    }
    let bits = layout.merge(&new_tiles);
    let provenance = mask.map_or(Provenance::Dub, |mk| match mk.provenance {
        Provenance::Tile | Provenance::Sdub => Provenance::Sdub,
        _ => Provenance::Dub,
    });
    Ok((
        PruneMask::from_bits(m.rows(), m.cols(), bits).with_provenance(provenance),
        plans,
    ))
}

/// Per-tile discretized pruning with the threshold taken from `allowed_ratio`.
/// A ratio of zero prunes nothing; the plan then reports each tile's current
/// level instead of rounding padded tiles up to a sparser one.
pub fn prune_layer_per_tile(
    m: &LayerMatrix,
    mask: Option<&PruneMask>,
    allowed_ratio: f64,
    tile_size: usize,
) -> Result<(PruneMask, LayerPlan)> {
    if allowed_ratio == 0.0 {
        check_mask(m, mask)?;
        return Ok((
            mask.cloned().unwrap_or_else(|| PruneMask::ones(m.rows(), m.cols())),
            LayerPlan {
                name: m.name().to_string(),
                allowed_ratio,
                threshold: 0.0,
                tiles: current_levels(m, mask, tile_size)?,
            },
        ));
    }
    let threshold = match layer_threshold(m, mask, allowed_ratio) {
        Ok(t) => t,
        // every weight already masked: any threshold gives the same result
        Err(Error::EmptyLayer(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let (mask, tiles) = prune_layer_with_threshold(m, mask, threshold, tile_size)?;
    Ok((
        mask,
        LayerPlan {
            name: m.name().to_string(),
            allowed_ratio,
            threshold,
            tiles,
        },
    ))
}

fn current_levels(m: &LayerMatrix, mask: Option<&PruneMask>, tile_size: usize) -> Result<Vec<TilePlan>> {
    let mut masked = m.clone();
    if let Some(mk) = mask {
        mk.apply(&mut masked);
    }
    let levels = SparsityLevelSet::new(tile_size)?;
    let grid = partition(&masked, tile_size)?;
    Ok(grid
        .tiles
        .iter()
        .map(|tile| {
            let stats = tile_stats(tile);
            let level = levels.level_for_max_nnz(stats.max_nnz());
            TilePlan {
                index: tile.index,
                lsc_index: stats.lsc_index,
                lsc_identified: tile_size - stats.max_nnz(),
                level,
                keep: level.keep(tile_size),
            }
        })
        .collect())
}

/// Layer-wise magnitude pruning at the quantile threshold.
pub fn prune_unstructured(
    m: &LayerMatrix,
    mask: Option<&PruneMask>,
    allowed_ratio: f64,
) -> Result<PruneMask> {
    check_mask(m, mask)?;
    let threshold = layer_threshold(m, mask, allowed_ratio)?;
    let bits = m
        .values()
        .iter()
        .enumerate()
        .map(|(i, w)| mask.is_none_or(|mk| mk.keep(i)) && w.abs() >= threshold)
        .collect();
    Ok(PruneMask::from_bits(m.rows(), m.cols(), bits).with_provenance(Provenance::Unstructured))
}

/// Removes whole crossbar groups (columns, rows or tiles) in order of
/// increasing L2 norm. A group is removed only if the layer's pruned count
/// stays within `allowed_ratio`; groups that would overrun it are skipped.
pub fn prune_structured(
    m: &LayerMatrix,
    mask: Option<&PruneMask>,
    tile_size: usize,
    grouping: Grouping,
    allowed_ratio: f64,
) -> Result<PruneMask> {
    check_mask(m, mask)?;
    if !(0.0..=1.0).contains(&allowed_ratio) {
        return Err(Error::InvalidArgument(format!(
            "allowed pruning ratio must lie in [0, 1], got {allowed_ratio}"
        )));
    }
    let layout = TileLayout::new(m.rows(), m.cols(), tile_size)?;
    let mut bits: Vec<bool> = match mask {
        Some(mk) => mk.bits().to_vec(),
        None => vec![true; m.values().len()],
    };
    let total = bits.len();
    let target = allowed_ratio * total as f64;
    let mut removed = bits.iter().filter(|&&b| !b).count();

    let values = m.values();
    let mut groups: Vec<(f64, usize, Vec<usize>)> = group_indices(&layout, grouping)
        .into_iter()
        .enumerate()
        .map(|(g, idx)| {
            let norm = idx
                .iter()
                .filter(|&&i| bits[i])
                .map(|&i| values[i] * values[i])
                .sum::<f64>()
                .sqrt();
            (norm, g, idx)
        })
        .collect();
    groups.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (_, _, idx) in groups {
        let live = idx.iter().filter(|&&i| bits[i]).count();
        if live == 0 || (removed + live) as f64 > target + 1e-9 {
            continue;
        }
        for i in idx {
            bits[i] = false;
        }
        removed += live;
    }
    Ok(PruneMask::from_bits(m.rows(), m.cols(), bits).with_provenance(grouping.into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsity::{l0_count, tile_stats};
    use crate::tiling::{partition, LayerShape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(rows: usize, cols: usize, values: Vec<f64>) -> LayerMatrix {
        LayerMatrix::new("l", LayerShape::dense(rows, cols), values).unwrap()
    }

    #[test]
    fn threshold_examples() {
        let m = layer(1, 4, vec![1.0, -2.0, 3.0, 4.0]);
        assert_eq!(layer_threshold(&m, None, 0.5).unwrap(), 3.0);
        assert_eq!(layer_threshold(&m, None, 0.0).unwrap(), 0.0);
        let eq = layer(1, 4, vec![2.0, -2.0, 2.0, 2.0]);
        let tau = layer_threshold(&eq, None, 0.5).unwrap();
        assert_eq!(eq.values().iter().filter(|w| w.abs() < tau).count(), 0);
        assert!(layer_threshold(&m, None, 1.0).is_err());
        let all_masked = PruneMask::from_bits(1, 4, vec![false; 4]);
        assert!(matches!(
            layer_threshold(&m, Some(&all_masked), 0.5),
            Err(Error::EmptyLayer(_))
        ));
    }

    #[test]
    fn unstructured_examples() {
        let m = layer(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let mask = prune_unstructured(&m, None, 0.5).unwrap();
        assert_eq!(mask.bits(), &[false, false, true, true]);
        let mask = prune_unstructured(&m, None, 0.0).unwrap();
        assert!(mask.bits().iter().all(|&b| b));
    }

    #[test]
    fn unstructured_ratio_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let rows = rng.random_range(1..40);
            let cols = rng.random_range(1..40);
            let vals = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = layer(rows, cols, vals);
            let ratio = rng.random_range(0.0..0.99);
            let mask = prune_unstructured(&m, None, ratio).unwrap();
            let size = (rows * cols) as f64;
            assert!((mask.pruned_fraction() - ratio).abs() <= 1.0 / size + 1e-12);
        }
    }

    /// The 64x64 tile of the worked example: LSC (column 0) has 45 weights
    /// below the threshold, column 1 has 55, every other column 60.
    fn worked_example_tile() -> Tile {
        let n = 64;
        let mut values = vec![0.0; n * n];
        for c in 0..n {
            let identified = match c {
                0 => 45,
                1 => 55,
                _ => 60,
            };
            for r in 0..n {
                // rows below `identified` are small, the rest large; all distinct
                let base = if r < identified { 0.001 } else { 1.0 };
                values[r * n + c] = base * (1.0 + (r * n + c) as f64 * 1e-4);
            }
        }
        Tile::dense(0, n, values)
    }

    #[test]
    fn worked_example_keeps_sixteen_everywhere() {
        let tile = worked_example_tile();
        let levels = SparsityLevelSet::new(64).unwrap();
        let (plan, mask) = prune_tile(&tile, None, 0.5, &levels);
        assert_eq!(plan.lsc_index, 0);
        assert_eq!(plan.lsc_identified, 45);
        assert_eq!(plan.level, Level::Reduced(2));
        assert_eq!(plan.keep, 16);
        for c in 0..64 {
            assert_eq!((0..64).filter(|&r| mask[r * 64 + c]).count(), 16);
        }
        // plain thresholding would have left column 1 with 9 weights
        assert_eq!((0..64).filter(|&r| tile.get(r, 1).abs() >= 0.5).count(), 9);
    }

    #[test]
    fn dense_tile_below_threshold_untouched() {
        let tile = Tile::dense(0, 8, (0..64).map(|i| 1.0 + i as f64).collect());
        let levels = SparsityLevelSet::new(8).unwrap();
        let (plan, mask) = prune_tile(&tile, None, 0.5, &levels);
        assert_eq!(plan.level, Level::Reduced(0));
        assert!(mask.iter().all(|&b| b));
    }

    #[test]
    fn magnitude_ties_keep_lower_rows() {
        let n = 4;
        // column 0 all equal magnitude; threshold identifies two in every column
        let mut values = vec![1.0; n * n];
        for c in 1..n {
            values[c] = 0.1;
            values[n + c] = 0.1;
        }
        values[0] = -1.0;
        let tile = Tile::dense(0, n, values);
        let levels = SparsityLevelSet::new(n).unwrap();
        let (plan, mask) = prune_tile(&tile, None, 0.5, &levels);
        // LSC is column 0 (zero identified) -> level 0, keep all
        assert_eq!(plan.keep, 4);
        assert!(mask.iter().all(|&b| b));

        let values = vec![2.0; n * n];
        let tile = Tile::dense(0, n, values);
        let (plan, mask) = prune_tile(&tile, None, 3.0, &levels);
        assert_eq!(plan.level, Level::Removed);
        assert!(mask.iter().all(|&b| !b));
        let (_, mask) = prune_tile(&tile, None, 0.0, &levels);
        assert!(mask.iter().all(|&b| b));
    }

    #[test]
    fn padding_counts_as_identified_and_is_never_kept() {
        let m = layer(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (mask, plan) = prune_layer_per_tile(&m, None, 1e-9, 4).unwrap();
        // LSC: 1 padded row of 4 -> 0.25, closest level 0.5 (tie broken upward)
        assert_eq!(plan.tiles[0].lsc_identified, 1);
        assert_eq!(plan.tiles[0].level, Level::Reduced(1));
        assert_eq!(mask.bits(), &[false, false, true, true, true, true]);
    }

    #[test]
    fn zero_ratio_prunes_nothing() {
        let m = layer(3, 2, vec![1.0, 2.0, 0.0, 4.0, 5.0, 6.0]);
        let (mask, plan) = prune_layer_per_tile(&m, None, 0.0, 4).unwrap();
        assert!(mask.bits().iter().all(|&b| b));
        // densest column holds 3 nonzeros of 4 -> full precision
        assert_eq!(plan.tiles[0].level, Level::Reduced(0));
        assert_eq!(plan.tiles[0].lsc_identified, 1);
    }

    #[test]
    fn structured_examples() {
        // two 2x2 tiles side by side with norms 1 and 10
        let m = layer(2, 4, vec![0.5, 0.5, 5.0, 5.0, 0.5, 0.5, 5.0, 5.0]);
        let mask = prune_structured(&m, None, 2, Grouping::Tile, 0.5).unwrap();
        assert_eq!(mask.bits(), &[false, false, true, true, false, false, true, true]);
        let mask = prune_structured(&m, None, 2, Grouping::Tile, 0.0).unwrap();
        assert!(mask.bits().iter().all(|&b| b));
    }

    #[test]
    fn column_pruning_leaves_dense_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vals = (0..16 * 16).map(|_| rng.random_range(0.1..1.0)).collect();
        let m = layer(16, 16, vals);
        let mask = prune_structured(&m, None, 8, Grouping::Column, 0.4).unwrap();
        let mut pruned = m.clone();
        mask.apply(&mut pruned);
        let g = partition(&pruned, 8).unwrap();
        for tile in &g.tiles {
            for col in tile.columns() {
                let nnz = l0_count(&col.weights);
                assert!(nnz == 0 || nnz == 8);
            }
        }
        // 12 of the 32 eight-weight tile columns fit in a 40% budget
        assert_eq!(mask.pruned(), 96);
        assert!(mask.pruned_fraction() <= 0.4);
    }

    #[test]
    fn mask_pack_round_trip() {
        let bits: Vec<bool> = (0..21).map(|i| i % 3 == 0).collect();
        let mask = PruneMask::from_bits(3, 7, bits.clone());
        let packed = mask.pack();
        assert_eq!(packed.len(), 3);
        assert_eq!(packed[0], 0b0100_1001);
        assert_eq!(PruneMask::unpack(3, 7, &packed).bits(), &bits[..]);
    }

    #[test]
    fn per_tile_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let rows = rng.random_range(1..30);
            let cols = rng.random_range(1..30);
            let vals = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = layer(rows, cols, vals);
            let ratio = rng.random_range(0.0..0.95);
            let (mask, plan) = prune_layer_per_tile(&m, None, ratio, 8).unwrap();
            let mut pruned = m.clone();
            mask.apply(&mut pruned);
            let (again, _) =
                prune_layer_with_threshold(&pruned, Some(&mask), plan.threshold, 8).unwrap();
            assert_eq!(again.bits(), mask.bits());
        }
    }

    #[test]
    fn balance_after_pruning() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vals = (0..40 * 24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = layer(40, 24, vals);
        let (mask, plan) = prune_layer_per_tile(&m, None, 0.8, 16).unwrap();
        let mut pruned = m.clone();
        mask.apply(&mut pruned);
        let g = partition(&pruned, 16).unwrap();
        let before = partition(&m, 16).unwrap();
        for ((tile, tp), orig) in g.tiles.iter().zip(&plan.tiles).zip(&before.tiles) {
            for c in 0..16 {
                let nnz = l0_count(&tile.column(c).weights);
                let had = l0_count(&orig.column(c).weights);
                assert!(nnz <= tp.keep);
                if had >= tp.keep {
                    assert_eq!(nnz, tp.keep);
                }
            }
            let stats = tile_stats(tile);
            assert!(stats.max_nnz() <= tp.keep);
        }
    }
}
