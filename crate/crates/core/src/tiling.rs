//! Layer flattening and logical crossbar tiles.
//!
//! Every weight layer is viewed as a 2-D matrix whose rows are fan-in
//! positions and whose columns are output units. Convolution weights
//! `(o, i, r, s)` land at row `i*k*k + r*k + s`, column `o`. The matrix is
//! then cut into `n x n` tiles in row-major block order; the last block row
//! and column are zero-padded and the padding is marked structural.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape metadata of a weight layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerShape {
    Dense {
        fan_in: usize,
        fan_out: usize,
    },
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
    },
}

impl LayerShape {
    pub fn dense(fan_in: usize, fan_out: usize) -> Self {
        LayerShape::Dense { fan_in, fan_out }
    }

    pub fn conv(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        LayerShape::Conv {
            out_channels,
            in_channels,
            kernel,
        }
    }

    /// Rows of the flattened matrix (`k*k*I` or `fan_in`).
    pub fn height(&self) -> usize {
        match *self {
            LayerShape::Dense { fan_in, .. } => fan_in,
            LayerShape::Conv {
                in_channels,
                kernel,
                ..
            } => kernel * kernel * in_channels,
        }
    }

    /// Columns of the flattened matrix (`O` or `fan_out`).
    pub fn width(&self) -> usize {
        match *self {
            LayerShape::Dense { fan_out, .. } => fan_out,
            LayerShape::Conv { out_channels, .. } => out_channels,
        }
    }

    pub fn numel(&self) -> usize {
        self.height() * self.width()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerShape::Dense { fan_in, fan_out } => fan_in >= 1 && fan_out >= 1,
            LayerShape::Conv {
                out_channels,
                in_channels,
                kernel,
            } => out_channels >= 1 && in_channels >= 1 && kernel >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "layer shape {self:?} has a zero dimension"
            )))
        }
    }
}

/// A layer's weights as a row-major `height x width` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMatrix {
    name: String,
    shape: LayerShape,
    values: Vec<f64>,
}

impl LayerMatrix {
    pub fn new(name: impl Into<String>, shape: LayerShape, values: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if values.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                expected: shape.numel(),
                actual: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite weight at flat index {pos}"
            )));
        }
        Ok(LayerMatrix {
            name: name.into(),
            shape,
            values,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: LayerShape) -> Self {
        LayerMatrix {
            name: name.into(),
            shape,
            values: vec![0.0; shape.numel()],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> LayerShape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.height()
    }

    pub fn cols(&self) -> usize {
        self.shape.width()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols() + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.cols();
        self.values[row * cols + col] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Inverse of [`flatten_layer`]: conv weights back in `(o, i, r, s)` order.
    pub fn to_tensor(&self) -> Vec<f64> {
        match self.shape {
            LayerShape::Dense { .. } => self.values.clone(),
            LayerShape::Conv {
                out_channels,
                in_channels,
                kernel,
            } => {
                let mut out = vec![0.0; self.values.len()];
                for o in 0..out_channels {
                    for i in 0..in_channels {
                        for r in 0..kernel {
                            for s in 0..kernel {
                                let row = conv_row(i, r, s, kernel);
                                out[((o * in_channels + i) * kernel + r) * kernel + s] =
                                    self.get(row, o);
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

#[inline]
fn conv_row(i: usize, r: usize, s: usize, kernel: usize) -> usize {
    i * kernel * kernel + r * kernel + s
}

/// Flattens layer weights into a [`LayerMatrix`].
///
/// Conv weights are given as a dense `(O, I, k, k)` tensor in row-major
/// order; dense weights are already a `fan_in x fan_out` matrix.
pub fn flatten_layer(name: &str, weights: &[f64], shape: LayerShape) -> Result<LayerMatrix> {
    shape.validate()?;
    if weights.len() != shape.numel() {
        return Err(Error::ShapeMismatch {
            expected: shape.numel(),
            actual: weights.len(),
        });
    }
    match shape {
        LayerShape::Dense { .. } => LayerMatrix::new(name, shape, weights.to_vec()),
        LayerShape::Conv {
            out_channels,
            in_channels,
            kernel,
        } => {
            let mut m = LayerMatrix::zeros(name, shape);
            for o in 0..out_channels {
                for i in 0..in_channels {
                    for r in 0..kernel {
                        for s in 0..kernel {
                            let v = weights[((o * in_channels + i) * kernel + r) * kernel + s];
                            m.set(conv_row(i, r, s, kernel), o, v);
                        }
                    }
                }
            }
            LayerMatrix::new(name, shape, m.values)
        }
    }
}

pub fn check_tile_size(n: usize) -> Result<()> {
    if n >= 2 && n.is_power_of_two() {
        Ok(())
    } else {
        Err(Error::InvalidTileSize(n))
    }
}

/// Index bookkeeping of a tiled `rows x cols` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLayout {
    pub tile_size: usize,
    pub rows: usize,
    pub cols: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl TileLayout {
    pub fn new(rows: usize, cols: usize, tile_size: usize) -> Result<Self> {
        check_tile_size(tile_size)?;
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot tile an empty {rows}x{cols} matrix"
            )));
        }
        Ok(TileLayout {
            tile_size,
            rows,
            cols,
            grid_rows: rows.div_ceil(tile_size),
            grid_cols: cols.div_ceil(tile_size),
        })
    }

    pub fn tile_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn pad_rows(&self) -> usize {
        self.grid_rows * self.tile_size - self.rows
    }

    pub fn pad_cols(&self) -> usize {
        self.grid_cols * self.tile_size - self.cols
    }

    /// `(block_row, block_col)` of tile `t` in row-major block order.
    pub fn block(&self, t: usize) -> (usize, usize) {
        (t / self.grid_cols, t % self.grid_cols)
    }

    /// Non-padded extent `(rows, cols)` of tile `t`.
    pub fn valid_extent(&self, t: usize) -> (usize, usize) {
        let (br, bc) = self.block(t);
        let n = self.tile_size;
        (
            (self.rows - br * n).min(n),
            (self.cols - bc * n).min(n),
        )
    }

    /// Flat matrix index of tile-local `(r, c)`, or `None` for padding.
    #[inline]
    pub fn matrix_index(&self, t: usize, r: usize, c: usize) -> Option<usize> {
        let (br, bc) = self.block(t);
        let row = br * self.tile_size + r;
        let col = bc * self.tile_size + c;
        (row < self.rows && col < self.cols).then(|| row * self.cols + col)
    }

    /// Copies a row-major `rows x cols` buffer into per-tile `n*n` buffers.
    pub fn split<T: Copy>(&self, data: &[T], pad: T) -> Vec<Vec<T>> {
        debug_assert_eq!(data.len(), self.rows * self.cols);
        let n = self.tile_size;
        (0..self.tile_count())
            .map(|t| {
                let mut buf = vec![pad; n * n];
                let (vr, vc) = self.valid_extent(t);
                let (br, bc) = self.block(t);
                for r in 0..vr {
                    let src = (br * n + r) * self.cols + bc * n;
                    buf[r * n..r * n + vc].copy_from_slice(&data[src..src + vc]);
                }
                buf
            })
            .collect()
    }

    /// Inverse of [`TileLayout::split`]; padded entries are dropped.
    pub fn merge<T: Copy + Default>(&self, tiles: &[Vec<T>]) -> Vec<T> {
        let n = self.tile_size;
        let mut out = vec![T::default(); self.rows * self.cols];
        for (t, buf) in tiles.iter().enumerate() {
            let (vr, vc) = self.valid_extent(t);
            let (br, bc) = self.block(t);
            for r in 0..vr {
                let dst = (br * n + r) * self.cols + bc * n;
                out[dst..dst + vc].copy_from_slice(&buf[r * n..r * n + vc]);
            }
        }
        out
    }
}

/// One `n x n` logical crossbar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub index: usize,
    pub tile_size: usize,
    pub valid_rows: usize,
    pub valid_cols: usize,
    /// Row-major `n*n` weights; padded cells hold 0.
    pub values: Vec<f64>,
}

impl Tile {
    /// A tile with no padding.
    pub fn dense(index: usize, tile_size: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), tile_size * tile_size);
        Tile {
            index,
            tile_size,
            valid_rows: tile_size,
            valid_cols: tile_size,
            values,
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.tile_size + c]
    }

    #[inline]
    pub fn is_structural(&self, r: usize, c: usize) -> bool {
        r >= self.valid_rows || c >= self.valid_cols
    }

    /// True when column `c` is entirely padding.
    pub fn column_is_structural(&self, c: usize) -> bool {
        c >= self.valid_cols
    }

    pub fn column(&self, c: usize) -> TileColumnView {
        let n = self.tile_size;
        TileColumnView {
            tile: self.index,
            column: c,
            weights: (0..n).map(|r| self.get(r, c)).collect(),
            structural: (0..n).map(|r| self.is_structural(r, c)).collect(),
        }
    }

    pub fn columns(&self) -> impl Iterator<Item = TileColumnView> + '_ {
        (0..self.tile_size).map(move |c| self.column(c))
    }
}

/// Weights of one tile column together with the padding indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct TileColumnView {
    pub tile: usize,
    pub column: usize,
    pub weights: Vec<f64>,
    pub structural: Vec<bool>,
}

/// A layer partitioned into logical tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct TileGrid {
    pub name: String,
    pub shape: LayerShape,
    pub layout: TileLayout,
    pub tiles: Vec<Tile>,
}

impl TileGrid {
    pub fn tile_size(&self) -> usize {
        self.layout.tile_size
    }

    pub fn pad_rows(&self) -> usize {
        self.layout.pad_rows()
    }

    pub fn pad_cols(&self) -> usize {
        self.layout.pad_cols()
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Exact inverse of [`partition`].
    pub fn unflatten(&self) -> LayerMatrix {
        let bufs: Vec<Vec<f64>> = self.tiles.iter().map(|t| t.values.clone()).collect();
        LayerMatrix {
            name: self.name.clone(),
            shape: self.shape,
            values: self.layout.merge(&bufs),
        }
    }
}

/// Cuts a layer matrix into `n x n` tiles, zero-padding the last blocks.
pub fn partition(m: &LayerMatrix, tile_size: usize) -> Result<TileGrid> {
    let layout = TileLayout::new(m.rows(), m.cols(), tile_size)?;
    let tiles = layout
        .split(m.values(), 0.0)
        .into_iter()
        .enumerate()
        .map(|(t, values)| {
            let (valid_rows, valid_cols) = layout.valid_extent(t);
            Tile {
                index: t,
                tile_size,
                valid_rows,
                valid_cols,
                values,
            }
        })
        .collect();
    Ok(TileGrid {
        name: m.name().to_string(),
        shape: m.shape(),
        layout,
        tiles,
    })
}

/// Free-function form of [`TileGrid::unflatten`].
pub fn unflatten(grid: &TileGrid) -> LayerMatrix {
    grid.unflatten()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: usize, cols: usize, f: impl Fn(usize) -> f64) -> LayerMatrix {
        LayerMatrix::new(
            "m",
            LayerShape::dense(rows, cols),
            (0..rows * cols).map(f).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conv_flatten_dimensions() {
        let shape = LayerShape::conv(8, 3, 3);
        let m = flatten_layer("c", &vec![1.0; 8 * 27], shape).unwrap();
        assert_eq!((m.rows(), m.cols()), (27, 8));
    }

    #[test]
    fn dense_identity_flattens_to_identity() {
        let mut w = vec![0.0; 16];
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        let m = flatten_layer("d", &w, LayerShape::dense(4, 4)).unwrap();
        assert_eq!(m.values(), &w[..]);
    }

    #[test]
    fn single_kernel_becomes_column() {
        let m = flatten_layer("c", &[1.0, 2.0, 3.0, 4.0], LayerShape::conv(1, 1, 2)).unwrap();
        assert_eq!((m.rows(), m.cols()), (4, 1));
        assert_eq!(m.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn flatten_rejects_wrong_count() {
        let err = flatten_layer("c", &[0.0; 10], LayerShape::conv(2, 1, 2)).unwrap_err();
        match err {
            Error::ShapeMismatch { expected, actual } => assert_eq!((expected, actual), (8, 10)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn partition_small_conv_matrix() {
        let m = matrix(27, 8, |i| i as f64);
        let g = partition(&m, 32).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!((g.pad_rows(), g.pad_cols()), (5, 24));
    }

    #[test]
    fn partition_exact_fit() {
        let g = partition(&matrix(64, 64, |i| i as f64), 64).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!((g.pad_rows(), g.pad_cols()), (0, 0));
    }

    #[test]
    fn partition_one_extra_row() {
        let g = partition(&matrix(65, 64, |i| 1.0 + i as f64), 64).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.layout.block(1), (1, 0));
        assert_eq!(g.tiles[1].valid_rows, 1);
        assert_eq!(g.tile_size() - g.tiles[1].valid_rows, 63);
        assert!(g.tiles[1].values[64..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partition_rejects_non_power_of_two() {
        assert!(matches!(
            partition(&matrix(4, 4, |_| 0.0), 24),
            Err(Error::InvalidTileSize(24))
        ));
        assert!(partition(&matrix(4, 4, |_| 0.0), 1).is_err());
    }

    #[test]
    fn unflatten_zero_and_single() {
        let z = LayerMatrix::zeros("z", LayerShape::dense(40, 33));
        assert_eq!(partition(&z, 16).unwrap().unflatten(), z);
        let m = matrix(64, 64, |i| (i as f64).sin());
        assert_eq!(unflatten(&partition(&m, 64).unwrap()), m);
    }

    #[test]
    fn column_view_marks_padding() {
        let g = partition(&matrix(3, 2, |i| i as f64 + 1.0), 4).unwrap();
        let col = g.tiles[0].column(1);
        assert_eq!(col.weights, vec![2.0, 4.0, 6.0, 0.0]);
        assert_eq!(col.structural, vec![false, false, false, true]);
        assert!(g.tiles[0].column(3).structural.iter().all(|&s| s));
    }

    proptest! {
        #[test]
        fn round_trip_and_count(rows in 1usize..90, cols in 1usize..90, log_n in 1u32..6, seed in any::<u64>()) {
            let n = 1usize << log_n;
            let m = matrix(rows, cols, |i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f64 - 500.0);
            let g = partition(&m, n).unwrap();
            prop_assert_eq!(g.len(), rows.div_ceil(n) * cols.div_ceil(n));
            for t in &g.tiles {
                for r in 0..n {
                    for c in 0..n {
                        if t.is_structural(r, c) {
                            prop_assert_eq!(t.get(r, c), 0.0);
                        }
                    }
                }
            }
            prop_assert_eq!(g.unflatten(), m);
        }

        #[test]
        fn conv_map_is_bijective(o in 1usize..5, i in 1usize..5, k in 1usize..4, seed in any::<u64>()) {
            let shape = LayerShape::conv(o, i, k);
            let w: Vec<f64> = (0..shape.numel()).map(|j| (j as u64 ^ seed) as f64).collect();
            let m = flatten_layer("c", &w, shape).unwrap();
            prop_assert_eq!(m.to_tensor(), w);
        }
    }
}
