//! In-memory labeled datasets and the seeded synthetic generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-sample input shape; samples are stored height-width-channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn flat(len: usize) -> Self {
        InputShape {
            channels: len,
            height: 1,
            width: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: InputShape,
    pub classes: usize,
    /// Row-major `len x shape.len()` inputs.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(shape: InputShape, classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.len() != labels.len() * shape.len() {
            return Err(Error::Data(format!(
                "{} input values do not form {} samples of size {}",
                inputs.len(),
                labels.len(),
                shape.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset {
            shape,
            classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.shape.len();
        &self.inputs[i * d..(i + 1) * d]
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            shape: self.shape,
            classes: self.classes,
            inputs: self.inputs[..n * self.shape.len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// Gaussian-blob classification data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub shape: InputShape,
    pub count: usize,
    /// Standard deviation of the class centers around the origin.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Standard deviation of samples around their class center.
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_separation() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    1.0
}

/// Seeded blobs: one random center per class, labels assigned round-robin.
/// Two draws from the same center seed with different `count`s share
/// centers, so train and test splits come from one distribution.
pub fn synth_data(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.count == 0 || spec.shape.is_empty() {
        return Err(Error::InvalidArgument(
            "synthetic data needs positive classes, count and dimensions".into(),
        ));
    }
    if !(spec.noise >= 0.0 && spec.separation >= 0.0) {
        return Err(Error::InvalidArgument("noise and separation must be >= 0".into()));
    }
    let dim = spec.shape.len();
    let mut center_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let centers: Vec<f64> = (0..spec.classes * dim)
        .map(|_| unit.sample(&mut center_rng) * spec.separation)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut inputs = Vec::with_capacity(spec.count * dim);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let label = i % spec.classes;
        let center = &centers[label * dim..(label + 1) * dim];
        inputs.extend(center.iter().map(|c| c + unit.sample(&mut rng) * spec.noise));
        labels.push(label);
    }
    Dataset::new(spec.shape, spec.classes, inputs, labels)
}

/// Train and test splits drawn from the same class centers.
pub fn synth_split(spec: &SynthSpec, test_count: usize) -> Result<(Dataset, Dataset)> {
    let all = synth_data(&SynthSpec {
        count: spec.count + test_count,
        ..*spec
    })?;
    let d = spec.shape.len();
    let cut = spec.count;
    let train = Dataset::new(
        all.shape,
        all.classes,
        all.inputs[..cut * d].to_vec(),
        all.labels[..cut].to_vec(),
    )?;
    let test = Dataset::new(
        all.shape,
        all.classes,
        all.inputs[cut * d..].to_vec(),
        all.labels[cut..].to_vec(),
    )?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec {
            classes: 3,
            shape: InputShape::flat(5),
            count: 31,
            separation: 2.0,
            noise: 0.5,
            seed,
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(synth_data(&spec(4)).unwrap(), synth_data(&spec(4)).unwrap());
        assert_ne!(synth_data(&spec(4)).unwrap(), synth_data(&spec(5)).unwrap());
    }

    #[test]
    fn labels_balanced() {
        let d = synth_data(&spec(1)).unwrap();
        let mut counts = [0usize; 3];
        for &l in &d.labels {
            counts[l] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "{counts:?}");
    }

    #[test]
    fn rejects_empty() {
        let mut s = spec(0);
        s.count = 0;
        assert!(synth_data(&s).is_err());
    }

    #[test]
    fn split_sizes() {
        let (tr, te) = synth_split(&spec(2), 9).unwrap();
        assert_eq!((tr.len(), te.len()), (31, 9));
    }
}
