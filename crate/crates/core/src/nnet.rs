//! A small feed-forward network with hand-written backpropagation.
//!
//! Activations are stored height-width-channel per sample. Convolutions are
//! lowered to a patch matrix whose columns follow the flattened weight-row
//! order `i*k*k + r*k + s`, so the conv weight matrix is exactly the
//! crossbar view of the layer.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, InputShape};
use crate::error::{Error, Result};
use crate::prune::PruneMask;
use crate::regularize::{gated_variance, l2_penalty, regularizer, variance_penalty, Grouping, LayerView, RegCoefficients};
use crate::tiling::{check_tile_size, partition, LayerMatrix, LayerShape};

/// Samples per gradient work unit. Fixed so the reduction order, and hence
/// every bit of the result, does not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Stride-1 convolution, zero padding `(kernel - 1) / 2`.
    Conv { filters: usize, kernel: usize },
    Dense { units: usize },
    Relu,
    /// 2x2 max pooling with stride 2.
    MaxPool,
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Number of outputs of the last layer.
    pub fn outputs(&self) -> Result<usize> {
        let mut shape = (self.input.height, self.input.width, self.input.channels);
        for spec in &self.layers {
            shape = next_shape(shape, spec)?;
        }
        Ok(shape.0 * shape.1 * shape.2)
    }
}

type Hwc = (usize, usize, usize);

fn next_shape((h, w, c): Hwc, spec: &LayerSpec) -> Result<Hwc> {
    Ok(match *spec {
        LayerSpec::Conv { filters, kernel } => {
            if filters == 0 || kernel == 0 {
                return Err(Error::Config("conv layers need filters and kernel >= 1".into()));
            }
            let pad = (kernel - 1) / 2;
            if h + 2 * pad < kernel || w + 2 * pad < kernel {
                return Err(Error::Config(format!("kernel {kernel} exceeds input {h}x{w}")));
            }
            (h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1, filters)
        }
        LayerSpec::Dense { units } => {
            if units == 0 {
                return Err(Error::Config("dense layers need units >= 1".into()));
            }
            (1, 1, units)
        }
        LayerSpec::Relu => (h, w, c),
        LayerSpec::MaxPool => {
            if h < 2 || w < 2 {
                return Err(Error::Config(format!("cannot pool a {h}x{w} input")));
            }
            (h / 2, w / 2, c)
        }
        LayerSpec::Flatten => (1, 1, h * w * c),
    })
}

/// Trainable parameters of one weight layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub weights: LayerMatrix,
    pub bias: Vec<f64>,
    pub mask: Option<PruneMask>,
}

impl Param {
    fn view(&self) -> LayerView<'_> {
        LayerView::new(&self.weights, self.mask.as_ref())
    }

    fn enforce_mask(&mut self) {
        if let Some(m) = &self.mask {
            m.apply(&mut self.weights);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv {
        param: Param,
        kernel: usize,
        input: Hwc,
        output: Hwc,
    },
    Dense {
        param: Param,
    },
    Relu,
    MaxPool {
        input: Hwc,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    layers: Vec<Layer>,
}

/// Per-layer gradients, in weight-layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Grads {
    fn zeros(net: &Network) -> Self {
        Grads {
            weights: net.params().map(|p| vec![0.0; p.weights.values().len()]).collect(),
            biases: net.params().map(|p| vec![0.0; p.bias.len()]).collect(),
        }
    }

    fn add(&mut self, other: &Grads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            add_into(a, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            add_into(a, b);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl Network {
    /// Builds a network with fan-in scaled uniform weights, `U(-b, b)` with
    /// `b = sqrt(6 / fan_in)`, and zero biases. Weights are f32-representable.
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.input.is_empty() {
            return Err(Error::Config("input shape must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = (arch.input.height, arch.input.width, arch.input.channels);
        let mut layers = Vec::with_capacity(arch.layers.len());
        let (mut convs, mut denses) = (0, 0);
        for spec in &arch.layers {
            let next = next_shape(shape, spec)?;
            let layer = match *spec {
                LayerSpec::Conv { filters, kernel } => {
                    convs += 1;
                    let ls = LayerShape::conv(filters, shape.2, kernel);
                    Layer::Conv {
                        param: init_param(format!("conv{convs}"), ls, &mut rng)?,
                        kernel,
                        input: shape,
                        output: next,
                    }
                }
                LayerSpec::Dense { units } => {
                    denses += 1;
                    let ls = LayerShape::dense(shape.0 * shape.1 * shape.2, units);
                    Layer::Dense {
                        param: init_param(format!("dense{denses}"), ls, &mut rng)?,
                    }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool => Layer::MaxPool { input: shape },
                LayerSpec::Flatten => Layer::Flatten,
            };
            layers.push(layer);
            shape = next;
        }
        let net = Network {
            arch: arch.clone(),
            layers,
        };
        if net.params().next().is_none() {
            return Err(Error::Config("network has no weight layers".into()));
        }
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_len(&self) -> usize {
        self.arch.input.len()
    }

    pub fn classes(&self) -> usize {
        self.arch.outputs().expect("validated at construction")
    }

    /// Weight layers in forward order.
    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv { param, .. } | Layer::Dense { param } => Some(param),
            _ => None,
        })
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv { param, .. } | Layer::Dense { param } => Some(param),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params().map(|p| p.weights.values().len() + p.bias.len()).sum()
    }

    /// Total weight count, excluding biases.
    pub fn weight_count(&self) -> usize {
        self.params().map(|p| p.weights.values().len()).sum()
    }

    pub fn weight_matrices(&self) -> Vec<&LayerMatrix> {
        self.params().map(|p| &p.weights).collect()
    }

    pub fn masks(&self) -> Vec<Option<PruneMask>> {
        self.params().map(|p| p.mask.clone()).collect()
    }

    pub fn views(&self) -> Vec<LayerView<'_>> {
        self.params().map(Param::view).collect()
    }

    /// Installs one optional mask per weight layer and zeroes masked weights.
    pub fn set_masks(&mut self, masks: Vec<Option<PruneMask>>) -> Result<()> {
        let count = self.params().count();
        if masks.len() != count {
            return Err(Error::Dimension(format!(
                "{} masks for {count} weight layers",
                masks.len()
            )));
        }
        for (p, m) in self.params().zip(&masks) {
            if let Some(m) = m {
                if m.rows() != p.weights.rows() || m.cols() != p.weights.cols() {
                    return Err(Error::Dimension(format!(
                        "mask {}x{} for layer '{}' of {}x{}",
                        m.rows(),
                        m.cols(),
                        p.weights.name(),
                        p.weights.rows(),
                        p.weights.cols()
                    )));
                }
            }
        }
        for (p, m) in self.params_mut().zip(masks) {
            p.mask = m;
            p.enforce_mask();
        }
        Ok(())
    }

    /// Replaces the weights of layer `index`, keeping its mask.
    pub fn set_weights(&mut self, index: usize, values: Vec<f64>, bias: Vec<f64>) -> Result<()> {
        let p = self
            .params_mut()
            .nth(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no weight layer {index}")))?;
        if bias.len() != p.bias.len() {
            return Err(Error::ShapeMismatch {
                expected: p.bias.len(),
                actual: bias.len(),
            });
        }
        p.weights = LayerMatrix::new(p.weights.name().to_string(), p.weights.shape(), values)?;
        p.bias = bias;
        p.enforce_mask();
        Ok(())
    }

    fn check_batch(&self, inputs: &[f64]) -> Result<usize> {
        let d = self.input_len();
        if inputs.len() % d != 0 {
            return Err(Error::ShapeMismatch {
                expected: d * (inputs.len() / d + 1),
                actual: inputs.len(),
            });
        }
        Ok(inputs.len() / d)
    }

    /// Logits for a row-major batch of inputs, `count x classes`.
    pub fn forward(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let count = self.check_batch(inputs)?;
        let d = self.input_len();
        let per: Vec<Vec<f64>> = (0..count)
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|i| self.forward_sample(&inputs[i * d..(i + 1) * d], None))
            .collect();
        Ok(per.concat())
    }

    fn forward_sample(&self, x: &[f64], mut caches: Option<&mut Vec<Cache>>) -> Vec<f64> {
        let mut act = x.to_vec();
        for layer in &self.layers {
            let (out, cache) = match layer {
                Layer::Conv {
                    param,
                    kernel,
                    input,
                    output,
                } => {
                    let patches = im2col(&act, *input, *kernel, *output);
                    let out = affine(&patches, output.0 * output.1, &param.weights, &param.bias);
                    (out, Cache::Patches(patches))
                }
                Layer::Dense { param } => {
                    let out = affine(&act, 1, &param.weights, &param.bias);
                    (out, Cache::Patches(act))
                }
                Layer::Relu => {
                    let out: Vec<f64> = act.iter().map(|&v| v.max(0.0)).collect();
                    (out.clone(), Cache::Active(out))
                }
                Layer::MaxPool { input } => {
                    let (out, argmax) = max_pool(&act, *input);
                    (out, Cache::Argmax(argmax, act.len()))
                }
                Layer::Flatten => (act, Cache::None),
            };
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
            act = out;
        }
        act
    }

    /// Mean softmax cross-entropy, the number of correct predictions and the
    /// exact gradients over one batch. Masked weights get zero gradient.
    pub fn gradients(&self, inputs: &[f64], labels: &[usize]) -> Result<(f64, usize, Grads)> {
        let count = self.check_batch(inputs)?;
        if count != labels.len() || count == 0 {
            return Err(Error::ShapeMismatch {
                expected: count,
                actual: labels.len(),
            });
        }
        let classes = self.classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside {classes} classes")));
        }
        let d = self.input_len();
        let scale = 1.0 / count as f64;
        let parts: Vec<(f64, usize, Grads)> = (0..count.div_ceil(CHUNK))
            .into_par_iter()
            .map(|chunk| {
                let mut grads = Grads::zeros(self);
                let (mut loss, mut correct) = (0.0, 0);
                for i in chunk * CHUNK..((chunk + 1) * CHUNK).min(count) {
                    let (l, ok) = self.backprop_sample(&inputs[i * d..(i + 1) * d], labels[i], scale, &mut grads);
                    loss += l;
                    correct += ok as usize;
                }
                (loss, correct, grads)
            })
            .collect();
        let mut grads = Grads::zeros(self);
        let (mut loss, mut correct) = (0.0, 0);
        for (l, c, g) in &parts {
            loss += l;
            correct += c;
            grads.add(g);
        }
        for (p, g) in self.params().zip(grads.weights.iter_mut()) {
            if let Some(m) = &p.mask {
                for (i, v) in g.iter_mut().enumerate() {
                    if !m.keep(i) {
                        *v = 0.0;
                    }
                }
            }
        }
        Ok((loss * scale, correct, grads))
    }

    fn backprop_sample(&self, x: &[f64], label: usize, scale: f64, grads: &mut Grads) -> (f64, bool) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let logits = self.forward_sample(x, Some(&mut caches));
        let probs = softmax(&logits);
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        let correct = argmax(&logits) == label;
        let mut delta: Vec<f64> = probs.iter().map(|p| p * scale).collect();
        delta[label] -= scale;

        let mut widx = grads.weights.len();
        for (li, (layer, cache)) in self.layers.iter().zip(&caches).enumerate().rev() {
            let first = li == 0;
            delta = match (layer, cache) {
                (
                    Layer::Conv {
                        param,
                        kernel,
                        input,
                        output,
                    },
                    Cache::Patches(patches),
                ) => {
                    widx -= 1;
                    let positions = output.0 * output.1;
                    let dpatch = affine_backward(
                        patches,
                        positions,
                        &param.weights,
                        &delta,
                        &mut grads.weights[widx],
                        &mut grads.biases[widx],
                        !first,
                    );
                    if first {
                        Vec::new()
                    } else {
                        col2im(&dpatch, *input, *kernel, *output)
                    }
                }
                (Layer::Dense { param }, Cache::Patches(input)) => {
                    widx -= 1;
                    affine_backward(
                        input,
                        1,
                        &param.weights,
                        &delta,
                        &mut grads.weights[widx],
                        &mut grads.biases[widx],
                        !first,
                    )
                }
                (Layer::Relu, Cache::Active(out)) => delta
                    .iter()
                    .zip(out)
                    .map(|(&g, &o)| if o > 0.0 { g } else { 0.0 })
                    .collect(),
                (Layer::MaxPool { .. }, Cache::Argmax(idx, len)) => {
                    let mut back = vec![0.0; *len];
                    for (&src, &g) in idx.iter().zip(&delta) {
                        back[src] += g;
                    }
                    back
                }
                (Layer::Flatten, Cache::None) => delta,
                _ => unreachable!("cache kind follows layer kind"),
            };
        }
        (loss, correct)
    }

    /// Mean cross-entropy and accuracy over a dataset.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::Data("cannot evaluate on an empty dataset".into()));
        }
        if data.shape.len() != self.input_len() {
            return Err(Error::ShapeMismatch {
                expected: self.input_len(),
                actual: data.shape.len(),
            });
        }
        let logits = self.forward(&data.inputs)?;
        let loss = loss_cls(&logits, &data.labels)?;
        let c = self.classes();
        let correct = data
            .labels
            .iter()
            .enumerate()
            .filter(|(i, &l)| argmax(&logits[i * c..(i + 1) * c]) == l)
            .count();
        Ok((loss, correct as f64 / data.len() as f64))
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        Ok(self.evaluate(data)?.1)
    }
}

fn init_param(name: String, shape: LayerShape, rng: &mut ChaCha8Rng) -> Result<Param> {
    let bound = (6.0 / shape.height() as f64).sqrt();
    let values = (0..shape.numel())
        .map(|_| round_f32(rng.random_range(-bound..bound)))
        .collect();
    Ok(Param {
        weights: LayerMatrix::new(name, shape, values)?,
        bias: vec![0.0; shape.width()],
        mask: None,
    })
}

enum Cache {
    Patches(Vec<f64>),
    Active(Vec<f64>),
    Argmax(Vec<usize>, usize),
    None,
}

/// `positions x K` patch matrix of an HWC input.
fn im2col(x: &[f64], (h, w, c): Hwc, k: usize, (oh, ow, _): Hwc) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let kk = c * k * k;
    let mut patches = vec![0.0; oh * ow * kk];
    for y in 0..oh {
        for xo in 0..ow {
            let row = &mut patches[(y * ow + xo) * kk..(y * ow + xo + 1) * kk];
            for r in 0..k {
                let iy = (y + r).wrapping_sub(pad);
                if iy >= h {
                    continue;
                }
                for s in 0..k {
                    let ix = (xo + s).wrapping_sub(pad);
                    if ix >= w {
                        continue;
                    }
                    let base = (iy * w + ix) * c;
                    for i in 0..c {
                        row[i * k * k + r * k + s] = x[base + i];
                    }
                }
            }
        }
    }
    patches
}

fn col2im(dpatch: &[f64], (h, w, c): Hwc, k: usize, (oh, ow, _): Hwc) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let kk = c * k * k;
    let mut dx = vec![0.0; h * w * c];
    for y in 0..oh {
        for xo in 0..ow {
            let row = &dpatch[(y * ow + xo) * kk..(y * ow + xo + 1) * kk];
            for r in 0..k {
                let iy = (y + r).wrapping_sub(pad);
                if iy >= h {
                    continue;
                }
                for s in 0..k {
                    let ix = (xo + s).wrapping_sub(pad);
                    if ix >= w {
                        continue;
                    }
                    let base = (iy * w + ix) * c;
                    for i in 0..c {
                        dx[base + i] += row[i * k * k + r * k + s];
                    }
                }
            }
        }
    }
    dx
}

/// `out[p] = patches[p] . W + b` for each position `p`.
fn affine(patches: &[f64], positions: usize, w: &LayerMatrix, bias: &[f64]) -> Vec<f64> {
    let (kk, o) = (w.rows(), w.cols());
    let wv = w.values();
    let mut out = Vec::with_capacity(positions * o);
    for p in 0..positions {
        let mut acc = bias.to_vec();
        for (j, &v) in patches[p * kk..(p + 1) * kk].iter().enumerate() {
            if v != 0.0 {
                for (a, &wj) in acc.iter_mut().zip(&wv[j * o..(j + 1) * o]) {
                    *a += v * wj;
                }
            }
        }
        out.extend(acc);
    }
    out
}

/// Accumulates weight and bias gradients; returns the patch gradient when
/// `need_input` is set.
fn affine_backward(
    patches: &[f64],
    positions: usize,
    w: &LayerMatrix,
    delta: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    need_input: bool,
) -> Vec<f64> {
    let (kk, o) = (w.rows(), w.cols());
    let wv = w.values();
    let mut dpatch = if need_input { vec![0.0; positions * kk] } else { Vec::new() };
    for p in 0..positions {
        let d = &delta[p * o..(p + 1) * o];
        add_into(gb, d);
        for (j, &v) in patches[p * kk..(p + 1) * kk].iter().enumerate() {
            let wrow = &wv[j * o..(j + 1) * o];
            if v != 0.0 {
                for (g, &dj) in gw[j * o..(j + 1) * o].iter_mut().zip(d) {
                    *g += v * dj;
                }
            }
            if need_input {
                dpatch[p * kk + j] = wrow.iter().zip(d).map(|(a, b)| a * b).sum();
            }
        }
    }
    dpatch
}

fn max_pool(x: &[f64], (h, w, c): Hwc) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut idx = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for xo in 0..ow {
            for ch in 0..c {
                let mut best = ((2 * y) * w + 2 * xo) * c + ch;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * y + dy) * w + 2 * xo + dx) * c + ch;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy averaged over the batch; `logits` is
/// `labels.len() x C` row-major.
pub fn loss_cls(logits: &[f64], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || logits.len() % labels.len() != 0 {
        return Err(Error::ShapeMismatch {
            expected: labels.len(),
            actual: logits.len(),
        });
    }
    let c = logits.len() / labels.len();
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::Data(format!("label {l} outside {c} classes")));
        }
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[l];
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate is multiplied by `lr_decay` every `lr_step` epochs;
    /// `lr_step = 0` keeps it constant.
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub lr_step: usize,
    #[serde(default)]
    pub reg: RegCoefficients,
    #[serde(default)]
    pub grouping: Option<Grouping>,
    pub tile_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub finetune_epochs: usize,
    #[serde(default)]
    pub finetune_learning_rate: Option<f64>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_lr_decay() -> f64 {
    0.5
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if let Some(lr) = self.finetune_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("finetune_learning_rate must be > 0, got {lr}")));
            }
        }
        check_tile_size(self.tile_size).map_err(|_| {
            Error::Config(format!("tile_size {} is not a power of two >= 2", self.tile_size))
        })?;
        self.reg.validate()?;
        if self.reg.lambda_group > 0.0 && self.grouping.is_none() {
            return Err(Error::Config("lambda_group is set but grouping is missing".into()));
        }
        Ok(())
    }

    /// Spec used for fine-tuning: L2 only, `finetune_epochs` epochs.
    pub fn finetune_spec(&self) -> TrainSpec {
        TrainSpec {
            epochs: self.finetune_epochs,
            learning_rate: self.finetune_learning_rate.unwrap_or(self.learning_rate),
            reg: RegCoefficients {
                lambda_mean: self.reg.lambda_mean,
                ..RegCoefficients::default()
            },
            grouping: None,
            ..*self
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_step == 0 {
            self.learning_rate
        } else {
            self.learning_rate * self.lr_decay.powi((epoch / self.lr_step) as i32)
        }
    }
}

/// Column Hoyer-Square summary of one tile at the end of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TileTrajectory {
    pub layer: usize,
    pub tile: usize,
    pub mean_hoyer: f64,
    pub max_hoyer: f64,
    pub variance: f64,
}

impl TileTrajectory {
    pub fn gap(&self) -> f64 {
        self.max_hoyer - self.mean_hoyer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub cls_loss: f64,
    /// Unscaled penalty values of the weights at the end of the epoch.
    pub l2: f64,
    pub var_reg: f64,
    pub group_reg: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub tiles: Vec<TileTrajectory>,
}

impl EpochRecord {
    pub fn mean_tile_variance(&self) -> f64 {
        mean(self.tiles.iter().map(|t| t.variance))
    }

    pub fn mean_lsc_gap(&self) -> f64 {
        mean(self.tiles.iter().map(TileTrajectory::gap))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "cls_loss", "l2", "var_reg", "train_acc", "test_acc"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.cls_loss.to_string(),
                e.l2.to_string(),
                e.var_reg.to_string(),
                e.train_acc.to_string(),
                e.test_acc.map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("history", e))?;
        Ok(())
    }

    /// Per-tile column Hoyer-Square trajectory, one row per epoch and tile.
    pub fn write_tiles_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "layer", "tile", "mean_hoyer", "max_hoyer", "variance"])?;
        for e in &self.epochs {
            for t in &e.tiles {
                w.write_record([
                    e.epoch.to_string(),
                    t.layer.to_string(),
                    t.tile.to_string(),
                    t.mean_hoyer.to_string(),
                    t.max_hoyer.to_string(),
                    t.variance.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("tile trajectory", e))?;
        Ok(())
    }
}

/// Per-tile Hoyer-Square statistics of the current (masked) weights.
pub fn tile_trajectory(net: &Network, tile_size: usize) -> Result<Vec<TileTrajectory>> {
    let mut out = Vec::new();
    for (layer, view) in net.views().iter().enumerate() {
        let masked = LayerMatrix::new(view.matrix.name(), view.matrix.shape(), view.masked_values())?;
        let grid = partition(&masked, tile_size)?;
        for tile in &grid.tiles {
            let cols: Vec<_> = tile.columns().collect();
            let tv = gated_variance(&cols);
            let max_hoyer = tv
                .hoyer
                .iter()
                .zip(&cols)
                .filter(|(_, c)| !c.structural.iter().all(|&s| s))
                .map(|(h, _)| *h)
                .fold(0.0, f64::max);
            out.push(TileTrajectory {
                layer,
                tile: tile.index,
                mean_hoyer: tv.mean,
                max_hoyer,
                variance: tv.value,
            });
        }
    }
    Ok(out)
}

fn check_data(net: &Network, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.shape.len() != net.input_len() {
        return Err(Error::ShapeMismatch {
            expected: net.input_len(),
            actual: data.shape.len(),
        });
    }
    if data.classes > net.classes() {
        return Err(Error::Data(format!(
            "dataset has {} classes, network outputs {}",
            data.classes,
            net.classes()
        )));
    }
    Ok(())
}

/// SGD with momentum on classification loss plus the configured
/// regularizer. The regularizer is evaluated on the current weights at every
/// step; masks stay fixed and masked weights stay exactly zero. Weights are
/// rounded to f32 after each update.
pub fn train(net: &mut Network, data: &Dataset, test: Option<&Dataset>, spec: &TrainSpec) -> Result<History> {
    spec.validate()?;
    check_data(net, data)?;
    if let Some(t) = test {
        check_data(net, t)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut vel = Grads::zeros(net);
    let mut history = History::default();
    let use_reg = spec.reg.lambda_mean > 0.0 || spec.reg.lambda_var > 0.0 || spec.reg.lambda_group > 0.0;
    let d = data.shape.len();
    let mut inputs = Vec::with_capacity(spec.batch_size * d);
    let mut labels = Vec::with_capacity(spec.batch_size);

    for epoch in 0..spec.epochs {
        let lr = spec.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut steps) = (0.0, 0usize, 0usize);
        for (step, batch) in order.chunks(spec.batch_size).enumerate() {
            inputs.clear();
            labels.clear();
            for &i in batch {
                inputs.extend_from_slice(data.sample(i));
                labels.push(data.labels[i]);
            }
            let (loss, ok, mut grads) = net.gradients(&inputs, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "classification loss became {loss} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += loss;
            correct += ok;
            steps += 1;
            if use_reg {
                let reg = regularizer(&net.views(), spec.tile_size, &spec.reg, spec.grouping)?;
                if !reg.value.is_finite() {
                    return Err(Error::Numerical(format!(
                        "regularizer became {} at epoch {epoch}, step {step}",
                        reg.value
                    )));
                }
                for (g, r) in grads.weights.iter_mut().zip(&reg.gradient) {
                    add_into(g, r);
                }
            }
            sgd_step(net, &grads, &mut vel, lr, spec.momentum)?;
        }
        let l2 = l2_penalty(&net.views()).value;
        let var_reg = variance_penalty(&net.views(), spec.tile_size)?.value;
        let group_reg = match spec.grouping {
            Some(g) => crate::regularize::group_lasso(&net.views(), spec.tile_size, g)?.value,
            None => 0.0,
        };
        let test_acc = test.map(|t| net.accuracy(t)).transpose()?;
        history.epochs.push(EpochRecord {
            epoch,
            learning_rate: lr,
            cls_loss: loss_sum / steps as f64,
            l2,
            var_reg,
            group_reg,
            train_acc: correct as f64 / data.len() as f64,
            test_acc,
            tiles: tile_trajectory(net, spec.tile_size)?,
        });
    }
    Ok(history)
}

fn sgd_step(net: &mut Network, grads: &Grads, vel: &mut Grads, lr: f64, momentum: f64) -> Result<()> {
    for ((p, (g, gb)), (v, vb)) in net
        .params_mut()
        .zip(grads.weights.iter().zip(&grads.biases))
        .zip(vel.weights.iter_mut().zip(vel.biases.iter_mut()))
    {
        let mask = p.mask.clone();
        let w = p.weights.values_mut();
        for i in 0..w.len() {
            if mask.as_ref().is_some_and(|m| !m.keep(i)) {
                v[i] = 0.0;
                w[i] = 0.0;
                continue;
            }
            v[i] = momentum * v[i] + g[i];
            w[i] = round_f32(w[i] - lr * v[i]);
        }
        for i in 0..p.bias.len() {
            vb[i] = momentum * vb[i] + gb[i];
            p.bias[i] = round_f32(p.bias[i] - lr * vb[i]);
        }
        if w.iter().chain(&p.bias).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "layer '{}' has non-finite parameters after an update",
                p.weights.name()
            )));
        }
    }
    Ok(())
}

/// Installs `masks` and retrains the surviving weights with
/// [`TrainSpec::finetune_spec`]. Masks never change.
pub fn finetune(
    net: &mut Network,
    masks: Vec<Option<PruneMask>>,
    data: &Dataset,
    test: Option<&Dataset>,
    spec: &TrainSpec,
) -> Result<History> {
    net.set_masks(masks)?;
    train(net, data, test, &spec.finetune_spec())
}
