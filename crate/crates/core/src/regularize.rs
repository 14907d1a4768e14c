//! Training-time penalties: L2 weight decay, the gated tile-wise variance of
//! Hoyer-Square column measures, and group lasso over crossbar structures.
//!
//! Every penalty works on a list of [`LayerView`]s and returns one gradient
//! buffer per layer, congruent with the layer matrix. Masked-out weights
//! never receive gradient.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prune::PruneMask;
use crate::sparsity::{hoyer_square, hoyer_square_grad};
use crate::tiling::{LayerMatrix, TileColumnView, TileLayout};

/// Guard in the group-lasso gradient denominator.
pub const GROUP_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegCoefficients {
    #[serde(default)]
    pub lambda_mean: f64,
    #[serde(default)]
    pub lambda_var: f64,
    #[serde(default)]
    pub lambda_group: f64,
}

impl RegCoefficients {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_mean", self.lambda_mean),
            ("lambda_var", self.lambda_var),
            ("lambda_group", self.lambda_group),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.lambda_var > 0.0 && self.lambda_group > 0.0 {
            return Err(Error::Config(
                "lambda_var and lambda_group cannot both be nonzero".into(),
            ));
        }
        Ok(())
    }
}

/// Crossbar structure used as a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Column,
    Row,
    Tile,
}

/// A layer's weights with its optional frozen mask.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub matrix: &'a LayerMatrix,
    pub mask: Option<&'a PruneMask>,
}

impl<'a> LayerView<'a> {
    pub fn new(matrix: &'a LayerMatrix, mask: Option<&'a PruneMask>) -> Self {
        LayerView { matrix, mask }
    }

    #[inline]
    fn trainable(&self, idx: usize) -> bool {
        self.mask.is_none_or(|m| m.keep(idx))
    }

    /// Weights with masked entries forced to zero.
    pub fn masked_values(&self) -> Vec<f64> {
        let v = self.matrix.values();
        match self.mask {
            None => v.to_vec(),
            Some(m) => v
                .iter()
                .enumerate()
                .map(|(i, &w)| if m.keep(i) { w } else { 0.0 })
                .collect(),
        }
    }

    fn zero_masked(&self, grad: &mut [f64]) {
        if let Some(m) = self.mask {
            for (i, g) in grad.iter_mut().enumerate() {
                if !m.keep(i) {
                    *g = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegResult {
    pub value: f64,
    pub gradient: Vec<Vec<f64>>,
}

impl RegResult {
    fn zeros(layers: &[LayerView<'_>]) -> Self {
        RegResult {
            value: 0.0,
            gradient: layers
                .iter()
                .map(|l| vec![0.0; l.matrix.values().len()])
                .collect(),
        }
    }

    /// `self += scale * other`.
    pub fn accumulate(&mut self, other: &RegResult, scale: f64) {
        self.value += scale * other.value;
        for (dst, src) in self.gradient.iter_mut().zip(&other.gradient) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }
}

/// `sum w^2` over trainable weights; gradient `2w`.
pub fn l2_penalty(layers: &[LayerView<'_>]) -> RegResult {
    let mut out = RegResult::zeros(layers);
    for (layer, grad) in layers.iter().zip(out.gradient.iter_mut()) {
        for (i, (&w, g)) in layer.matrix.values().iter().zip(grad.iter_mut()).enumerate() {
            if layer.trainable(i) {
                out.value += w * w;
                *g = 2.0 * w;
            }
        }
    }
    out
}

/// Value and backward quantities of the gated variance for one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileVariance {
    pub value: f64,
    /// Mean Hoyer-Square over non-padding columns.
    pub mean: f64,
    pub hoyer: Vec<f64>,
    /// Gradient reaching each column's Hoyer-Square after the gate.
    pub gates: Vec<f64>,
    /// Per-column weight gradients, each of length `n`.
    pub gradient: Vec<Vec<f64>>,
}

/// Gated variance `sum_c (v_c - mu)^2` of one tile's column Hoyer-Square values.
///
/// In the backward pass `mu` is a constant and a column receives
/// `2 (v_c - mu)` only when `v_c > mu`; all other columns get exactly zero.
/// Columns made entirely of padding are left out of the mean and the sum.
pub fn gated_variance(columns: &[TileColumnView]) -> TileVariance {
    let n = columns.first().map(|c| c.weights.len()).unwrap_or(0);
    let active: Vec<bool> = columns
        .iter()
        .map(|c| !c.structural.iter().all(|&s| s))
        .collect();
    let hoyer: Vec<f64> = columns.iter().map(|c| hoyer_square(&c.weights)).collect();
    let count = active.iter().filter(|&&a| a).count();
    let mut zero = TileVariance {
        value: 0.0,
        mean: 0.0,
        gates: vec![0.0; columns.len()],
        gradient: vec![vec![0.0; n]; columns.len()],
        hoyer: hoyer.clone(),
    };
    if count == 0 {
        return zero;
    }
    let mean = hoyer
        .iter()
        .zip(&active)
        .filter(|(_, &a)| a)
        .map(|(v, _)| v)
        .sum::<f64>()
        / count as f64;
    zero.mean = mean;
    for (c, col) in columns.iter().enumerate() {
        if !active[c] {
            continue;
        }
        let dev = hoyer[c] - mean;
        zero.value += dev * dev;
        if hoyer[c] > mean {
            let gate = 2.0 * dev;
            zero.gates[c] = gate;
            zero.gradient[c] = hoyer_square_grad(&col.weights)
                .into_iter()
                .zip(&col.structural)
                .map(|(g, &s)| if s { 0.0 } else { gate * g })
                .collect();
        }
    }
    zero
}

/// Gated variance summed over every tile of every layer.
pub fn variance_penalty(layers: &[LayerView<'_>], tile_size: usize) -> Result<RegResult> {
    let mut out = RegResult::zeros(layers);
    for (layer, grad) in layers.iter().zip(out.gradient.iter_mut()) {
        let m = layer.matrix;
        let layout = TileLayout::new(m.rows(), m.cols(), tile_size)?;
        let values = layer.masked_values();
        let tiles = layout.split(&values, 0.0);
        let per_tile: Vec<(f64, Vec<f64>)> = tiles
            .par_iter()
            .enumerate()
            .map(|(t, buf)| {
                let columns = tile_columns(&layout, t, buf);
                let tv = gated_variance(&columns);
                let n = tile_size;
                let mut g = vec![0.0; n * n];
                for (c, col_grad) in tv.gradient.iter().enumerate() {
                    for (r, &v) in col_grad.iter().enumerate() {
                        g[r * n + c] = v;
                    }
                }
                (tv.value, g)
            })
            .collect();
        let mut bufs = Vec::with_capacity(per_tile.len());
        for (v, g) in per_tile {
            out.value += v;
            bufs.push(g);
        }
        *grad = layout.merge(&bufs);
        layer.zero_masked(grad);
    }
    Ok(out)
}

/// Column views of tile `t` taken from its `n*n` buffer.
pub fn tile_columns(layout: &TileLayout, t: usize, buf: &[f64]) -> Vec<TileColumnView> {
    let n = layout.tile_size;
    let (vr, vc) = layout.valid_extent(t);
    (0..n)
        .map(|c| TileColumnView {
            tile: t,
            column: c,
            weights: (0..n).map(|r| buf[r * n + c]).collect(),
            structural: (0..n).map(|r| r >= vr || c >= vc).collect(),
        })
        .collect()
}

/// Flat matrix indices of every group, tile by tile. Padding is excluded and
/// groups lying entirely in padding are dropped.
pub fn group_indices(layout: &TileLayout, grouping: Grouping) -> Vec<Vec<usize>> {
    let n = layout.tile_size;
    let mut groups = Vec::new();
    for t in 0..layout.tile_count() {
        let (vr, vc) = layout.valid_extent(t);
        match grouping {
            Grouping::Column => {
                for c in 0..vc {
                    groups.push((0..vr).filter_map(|r| layout.matrix_index(t, r, c)).collect());
                }
            }
            Grouping::Row => {
                for r in 0..vr {
                    groups.push((0..vc).filter_map(|c| layout.matrix_index(t, r, c)).collect());
                }
            }
            Grouping::Tile => {
                groups.push(
                    (0..n * n)
                        .filter_map(|i| layout.matrix_index(t, i / n, i % n))
                        .collect(),
                );
            }
        }
    }
    groups
}

/// `sum_g ||g||_2` over crossbar groups; gradient `w / (||g|| + eps)`.
pub fn group_lasso(
    layers: &[LayerView<'_>],
    tile_size: usize,
    grouping: Grouping,
) -> Result<RegResult> {
    let mut out = RegResult::zeros(layers);
    for (layer, grad) in layers.iter().zip(out.gradient.iter_mut()) {
        let m = layer.matrix;
        let layout = TileLayout::new(m.rows(), m.cols(), tile_size)?;
        let values = layer.masked_values();
        for group in group_indices(&layout, grouping) {
            let norm = group.iter().map(|&i| values[i] * values[i]).sum::<f64>().sqrt();
            out.value += norm;
            for &i in &group {
                grad[i] = values[i] / (norm + GROUP_EPS);
            }
        }
        layer.zero_masked(grad);
    }
    Ok(out)
}

/// Regularizer part of the training loss:
/// `lambda_mean * L2 + lambda_var * variance` or `+ lambda_group * group_lasso`.
pub fn regularizer(
    layers: &[LayerView<'_>],
    tile_size: usize,
    coeffs: &RegCoefficients,
    grouping: Option<Grouping>,
) -> Result<RegResult> {
    let mut out = RegResult::zeros(layers);
    if coeffs.lambda_mean > 0.0 {
        out.accumulate(&l2_penalty(layers), coeffs.lambda_mean);
    }
    if coeffs.lambda_var > 0.0 {
        out.accumulate(&variance_penalty(layers, tile_size)?, coeffs.lambda_var);
    }
    if coeffs.lambda_group > 0.0 {
        let grouping = grouping.ok_or_else(|| {
            Error::Config("lambda_group is set but no grouping was chosen".into())
        })?;
        out.accumulate(&group_lasso(layers, tile_size, grouping)?, coeffs.lambda_group);
    }
    Ok(out)
}

/// Full training loss: classification loss plus [`regularizer`]. The
/// returned gradient covers the regularizer only; the caller adds the
/// classification gradient it already holds.
pub fn total_loss(
    cls_loss: f64,
    layers: &[LayerView<'_>],
    tile_size: usize,
    coeffs: &RegCoefficients,
    grouping: Option<Grouping>,
) -> Result<RegResult> {
    let mut reg = regularizer(layers, tile_size, coeffs, grouping)?;
    reg.value += cls_loss;
    Ok(reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{LayerShape, Tile};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(rows: usize, cols: usize, values: Vec<f64>) -> LayerMatrix {
        LayerMatrix::new("l", LayerShape::dense(rows, cols), values).unwrap()
    }

    #[test]
    fn l2_examples() {
        let m = layer(1, 2, vec![1.0, -2.0]);
        let r = l2_penalty(&[LayerView::new(&m, None)]);
        assert_eq!(r.value, 5.0);
        assert_eq!(r.gradient[0], vec![2.0, -4.0]);
        let z = layer(2, 2, vec![0.0; 4]);
        let r = l2_penalty(&[LayerView::new(&z, None)]);
        assert_eq!(r.value, 0.0);
        assert_eq!(r.gradient[0], vec![0.0; 4]);
    }

    #[test]
    fn l2_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = layer(3, 4, vals.clone());
        let g = l2_penalty(&[LayerView::new(&m, None)]).gradient.remove(0);
        let h = 1e-6;
        for i in 0..12 {
            let f = |d: f64| {
                let mut v = vals.clone();
                v[i] += d;
                l2_penalty(&[LayerView::new(&layer(3, 4, v), None)]).value
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-8 * fd.abs().max(1.0), "{} vs {fd}", g[i]);
        }
    }

    #[test]
    fn l2_skips_masked() {
        let m = layer(1, 3, vec![1.0, 2.0, 3.0]);
        let mask = PruneMask::from_bits(1, 3, vec![true, false, true]);
        let r = l2_penalty(&[LayerView::new(&m, Some(&mask))]);
        assert_eq!(r.value, 10.0);
        assert_eq!(r.gradient[0], vec![2.0, 0.0, 6.0]);
    }

    /// Column views whose Hoyer-Square values are exactly `targets`.
    /// A column with `k` equal-magnitude entries has Hoyer-Square `k`.
    fn columns_with_counts(n: usize, counts: &[usize]) -> Vec<TileColumnView> {
        counts
            .iter()
            .enumerate()
            .map(|(c, &k)| TileColumnView {
                tile: 0,
                column: c,
                weights: (0..n).map(|r| if r < k { 1.0 } else { 0.0 }).collect(),
                structural: vec![false; n],
            })
            .collect()
    }

    #[test]
    fn gate_blocks_below_mean_columns() {
        let cols = columns_with_counts(8, &[7, 2, 6, 1]);
        let tv = gated_variance(&cols);
        assert!(tv.hoyer[0] > tv.mean && tv.hoyer[2] > tv.mean);
        assert!(tv.hoyer[1] < tv.mean && tv.hoyer[3] < tv.mean);
        assert_eq!(tv.gates[1], 0.0);
        assert_eq!(tv.gates[3], 0.0);
        assert!(tv.gradient[1].iter().chain(&tv.gradient[3]).all(|&g| g == 0.0));
        assert!(tv.gates[0] > 0.0 && tv.gates[2] > 0.0);
    }

    #[test]
    fn gate_values_by_hand() {
        // v = [50, 30, 48, 20], mu = 37 -> gVar = [26, 0, 22, 0]
        let cols = columns_with_counts(64, &[50, 30, 48, 20]);
        let tv = gated_variance(&cols);
        assert!((tv.mean - 37.0).abs() < 1e-9);
        let expected = [26.0, 0.0, 22.0, 0.0];
        for (g, e) in tv.gates.iter().zip(expected) {
            assert!((g - e).abs() < 1e-9, "{g} vs {e}");
        }
        let var: f64 = [13.0f64, -7.0, 11.0, -17.0].iter().map(|d| d * d).sum();
        assert!((tv.value - var).abs() < 1e-8);
    }

    #[test]
    fn identical_columns_have_zero_variance() {
        let cols = columns_with_counts(4, &[3, 3, 3, 3]);
        let tv = gated_variance(&cols);
        assert_eq!(tv.value, 0.0);
        assert!(tv.gates.iter().all(|&g| g == 0.0));
        assert!(tv.gradient.iter().flatten().all(|&g| g == 0.0));
    }

    #[test]
    fn padding_columns_excluded() {
        let t = Tile {
            index: 0,
            tile_size: 4,
            valid_rows: 4,
            valid_cols: 2,
            values: vec![
                1.0, 1.0, 0.0, 0.0, //
                1.0, 0.0, 0.0, 0.0, //
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0,
            ],
        };
        let cols: Vec<_> = t.columns().collect();
        let tv = gated_variance(&cols);
        // mean over the two real columns only: (3 + 1) / 2
        assert!((tv.mean - 2.0).abs() < 1e-9);
        assert!((tv.value - 2.0).abs() < 1e-9);
    }

    #[test]
    fn group_lasso_examples() {
        let m = layer(2, 1, vec![3.0, 4.0]);
        let r = group_lasso(&[LayerView::new(&m, None)], 2, Grouping::Column).unwrap();
        assert!((r.value - 5.0).abs() < 1e-12);
        assert!((r.gradient[0][0] - 0.6).abs() < 1e-12);
        assert!((r.gradient[0][1] - 0.8).abs() < 1e-12);
        let z = layer(2, 2, vec![0.0; 4]);
        let r = group_lasso(&[LayerView::new(&z, None)], 2, Grouping::Tile).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.gradient[0], vec![0.0; 4]);
    }

    #[test]
    fn group_indices_partition_weights() {
        let layout = TileLayout::new(5, 3, 4).unwrap();
        for grouping in [Grouping::Column, Grouping::Row, Grouping::Tile] {
            let mut all: Vec<usize> = group_indices(&layout, grouping).concat();
            all.sort_unstable();
            assert_eq!(all, (0..15).collect::<Vec<_>>(), "{grouping:?}");
        }
        assert_eq!(group_indices(&layout, Grouping::Column).len(), 6);
        assert_eq!(group_indices(&layout, Grouping::Row).len(), 5);
        assert_eq!(group_indices(&layout, Grouping::Tile).len(), 2);
    }

    #[test]
    fn regularizer_zero_coefficients() {
        let m = layer(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let r = total_loss(
            0.7,
            &[LayerView::new(&m, None)],
            2,
            &RegCoefficients::default(),
            None,
        )
        .unwrap();
        assert_eq!(r.value, 0.7);
        assert_eq!(r.gradient[0], vec![0.0; 4]);
    }

    #[test]
    fn total_loss_two_by_two_by_hand() {
        // columns [1, 3] and [2, 0]
        let m = layer(2, 2, vec![1.0, 2.0, 3.0, 0.0]);
        let coeffs = RegCoefficients {
            lambda_mean: 0.1,
            lambda_var: 0.5,
            lambda_group: 0.0,
        };
        let r = total_loss(1.25, &[LayerView::new(&m, None)], 2, &coeffs, None).unwrap();
        let l2 = 1.0 + 4.0 + 9.0;
        let v0 = 16.0 / 10.0;
        let v1 = 1.0;
        let mu = (v0 + v1) / 2.0;
        let var = (v0 - mu) * (v0 - mu) + (v1 - mu) * (v1 - mu);
        let expected = 1.25 + 0.1 * l2 + 0.5 * var;
        assert!((r.value - expected).abs() < 1e-12, "{} vs {expected}", r.value);
    }

    #[test]
    fn coefficient_validation() {
        let bad = RegCoefficients {
            lambda_mean: 0.0,
            lambda_var: 1.0,
            lambda_group: 1.0,
        };
        assert!(bad.validate().is_err());
        let neg = RegCoefficients {
            lambda_mean: -1.0,
            ..Default::default()
        };
        assert!(neg.validate().is_err());
    }
}
