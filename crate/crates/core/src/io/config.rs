//! Experiment configuration: JSON with strict keys plus `key=value` overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{synth_split, Dataset, InputShape, SynthSpec};
use crate::error::{Error, Result};
use crate::io::idx::load_idx;
use crate::nnet::{Architecture, TrainSpec};
use crate::regularize::Grouping;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "unstructured")]
    Unstructured,
    #[serde(rename = "dub")]
    Dub,
    #[serde(rename = "structured-column")]
    StructuredColumn,
    #[serde(rename = "structured-row")]
    StructuredRow,
    #[serde(rename = "structured-tile")]
    StructuredTile,
    #[serde(rename = "structured+pertile")]
    StructuredPerTile,
    #[serde(rename = "sdub")]
    Sdub,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Baseline,
        Method::Unstructured,
        Method::Dub,
        Method::StructuredColumn,
        Method::StructuredRow,
        Method::StructuredTile,
        Method::StructuredPerTile,
        Method::Sdub,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Unstructured => "unstructured",
            Method::Dub => "dub",
            Method::StructuredColumn => "structured-column",
            Method::StructuredRow => "structured-row",
            Method::StructuredTile => "structured-tile",
            Method::StructuredPerTile => "structured+pertile",
            Method::Sdub => "sdub",
        }
    }

    /// Group removed by a structured method.
    pub fn structure(self) -> Option<Grouping> {
        match self {
            Method::StructuredColumn => Some(Grouping::Column),
            Method::StructuredRow => Some(Grouping::Row),
            Method::StructuredTile => Some(Grouping::Tile),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        /// Use only the first `limit` training samples.
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Synthetic {
        classes: usize,
        shape: InputShape,
        count: usize,
        test_count: usize,
        #[serde(default = "one")]
        separation: f64,
        #[serde(default = "one")]
        noise: f64,
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

impl DataConfig {
    /// Training and held-out sets. Relative IDX paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<(Dataset, Option<Dataset>)> {
        match self {
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
                test_limit,
            } => {
                let mut train = load_idx(&base.join(train_images), &base.join(train_labels))?;
                if let Some(l) = limit {
                    train = train.take(*l);
                }
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => {
                        let t = load_idx(&base.join(i), &base.join(l))?;
                        Some(test_limit.map_or(t.clone(), |n| t.take(n)))
                    }
                    (None, None) => None,
                    _ => {
                        return Err(Error::Config(
                            "data.test_images and data.test_labels must be given together".into(),
                        ))
                    }
                };
                Ok((train, test))
            }
            DataConfig::Synthetic {
                classes,
                shape,
                count,
                test_count,
                separation,
                noise,
                seed,
            } => {
                let spec = SynthSpec {
                    classes: *classes,
                    shape: *shape,
                    count: *count,
                    separation: *separation,
                    noise: *noise,
                    seed: *seed,
                };
                if *test_count == 0 {
                    return Ok((crate::data::synth_data(&spec)?, None));
                }
                let (train, test) = synth_split(&spec, *test_count)?;
                Ok((train, Some(test)))
            }
        }
    }
}

/// First stage of S-DUB: group-lasso tile training and tile removal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredStage {
    pub lambda_group: f64,
    /// Fraction of each layer removed as whole tiles.
    pub ratio: f64,
    /// Epochs of the group-lasso stage; defaults to `train.epochs`.
    #[serde(default)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub architecture: Architecture,
    pub train: TrainSpec,
    pub method: Method,
    #[serde(default)]
    pub allowed_ratio: f64,
    /// Per-layer allowed ratios, overriding `allowed_ratio`.
    #[serde(default)]
    pub layer_ratios: BTreeMap<String, f64>,
    #[serde(default)]
    pub structured: Option<StructuredStage>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn tile_size(&self) -> usize {
        self.train.tile_size
    }

    pub fn ratio_for(&self, layer: &str) -> f64 {
        self.layer_ratios.get(layer).copied().unwrap_or(self.allowed_ratio)
    }

    /// Parses JSON text, applies `key=value` overrides and validates.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            match unknown_field(&inner) {
                Some(field) => match strip_field(&path, &field) {
                    parent if parent.is_empty() => Error::UnknownKey(field),
                    parent => Error::UnknownKey(format!("{parent}.{field}")),
                },
                None => Error::Config(format!("{path}: {inner}")),
            }
        })?;
        let mut cfg = cfg;
        if let (Some(g), None) = (cfg.method.structure(), cfg.train.grouping) {
            cfg.train.grouping = Some(g);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let outputs = self.architecture.outputs()?;
        if let DataConfig::Synthetic { classes, shape, .. } = &self.data {
            if *classes > outputs {
                return Err(Error::Config(format!(
                    "data.classes is {classes} but the network has {outputs} outputs"
                )));
            }
            if shape.len() != self.architecture.input.len() {
                return Err(Error::Config(format!(
                    "data.shape has {} values per sample, architecture.input has {}",
                    shape.len(),
                    self.architecture.input.len()
                )));
            }
        }
        for (name, r) in std::iter::once(("allowed_ratio", &self.allowed_ratio))
            .chain(self.layer_ratios.iter().map(|(k, v)| (k.as_str(), v)))
        {
            if !(0.0..1.0).contains(r) {
                return Err(Error::Config(format!("ratio for {name} must lie in [0, 1), got {r}")));
            }
        }
        let reg = &self.train.reg;
        let m = self.method;
        match m {
            Method::Baseline | Method::Unstructured => {
                if reg.lambda_var > 0.0 || reg.lambda_group > 0.0 {
                    return Err(Error::Config(format!(
                        "method {m} trains with L2 only; set lambda_var and lambda_group to 0"
                    )));
                }
            }
            Method::Dub | Method::Sdub => {
                if reg.lambda_group > 0.0 {
                    return Err(Error::Config(format!("method {m} does not use train.reg.lambda_group")));
                }
            }
            Method::StructuredColumn | Method::StructuredRow | Method::StructuredTile | Method::StructuredPerTile => {
                if reg.lambda_var > 0.0 {
                    return Err(Error::Config(format!("method {m} does not use lambda_var")));
                }
                if reg.lambda_group <= 0.0 {
                    return Err(Error::Config(format!("method {m} needs train.reg.lambda_group > 0")));
                }
                match (m.structure(), self.train.grouping) {
                    (Some(g), Some(h)) if g != h => {
                        return Err(Error::Config(format!(
                            "method {m} conflicts with train.grouping {h:?}"
                        )))
                    }
                    (None, None) => {
                        return Err(Error::Config(
                            "structured+pertile needs train.grouping (column, row or tile)".into(),
                        ))
                    }
                    _ => {}
                }
            }
        }
        match (m, &self.structured) {
            (Method::Sdub, None) => {
                return Err(Error::Config("method sdub needs a 'structured' section".into()));
            }
            (Method::Sdub, Some(s)) => {
                if !(s.lambda_group >= 0.0 && s.lambda_group.is_finite()) {
                    return Err(Error::Config("structured.lambda_group must be >= 0".into()));
                }
                if !(0.0..1.0).contains(&s.ratio) || s.ratio > self.allowed_ratio {
                    return Err(Error::Config(format!(
                        "structured.ratio must lie in [0, allowed_ratio], got {}",
                        s.ratio
                    )));
                }
            }
            (_, Some(_)) => {
                return Err(Error::Config(format!("'structured' section only applies to sdub, not {m}")));
            }
            _ => {}
        }
        Ok(())
    }
}

fn unknown_field(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

fn strip_field(path: &str, field: &str) -> String {
    path.strip_suffix(&format!(".{field}"))
        .or_else(|| path.strip_suffix(field))
        .unwrap_or(path)
        .trim_matches('.')
        .to_string()
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON when it
/// parses, otherwise taken as a string. Intermediate objects are created.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override '{spec}' has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| {
            Error::Config(format!("cannot set '{key}': '{}' is not an object", parts[..i].join(".")))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one segment")
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "data": {"source": "synthetic", "classes": 3, "shape": {"channels": 4, "height": 1, "width": 1},
                 "count": 30, "test_count": 6, "seed": 1},
        "architecture": {"input": {"channels": 4, "height": 1, "width": 1},
                         "layers": [{"kind": "dense", "units": 3}]},
        "train": {"learning_rate": 0.1, "batch_size": 4, "epochs": 2, "tile_size": 4, "seed": 0},
        "method": "dub",
        "allowed_ratio": 0.5
    }"#;

    #[test]
    fn parses_and_overrides() {
        let cfg = ExperimentConfig::from_json(BASE, &[]).unwrap();
        assert_eq!(cfg.method, Method::Dub);
        assert_eq!(cfg.train.momentum, 0.9);
        let cfg = ExperimentConfig::from_json(
            BASE,
            &["train.reg.lambda_var=0.01".into(), "method=unstructured".into(), "train.reg.lambda_var=0".into()],
        )
        .unwrap();
        assert_eq!(cfg.method, Method::Unstructured);
        assert_eq!(cfg.train.reg.lambda_var, 0.0);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_json(BASE, &["train.learning_rat=0.1".into()]).unwrap_err();
        assert!(matches!(&err, Error::UnknownKey(k) if k == "train.learning_rat"), "{err}");
        let err = ExperimentConfig::from_json(BASE, &["typo=1".into()]).unwrap_err();
        assert!(matches!(&err, Error::UnknownKey(k) if k == "typo"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn method_constraints() {
        assert!(ExperimentConfig::from_json(BASE, &["train.reg.lambda_group=0.1".into()]).is_err());
        assert!(ExperimentConfig::from_json(BASE, &["method=structured-tile".into()]).is_err());
        let ok = ExperimentConfig::from_json(
            BASE,
            &["method=structured-tile".into(), "train.reg.lambda_group=0.01".into()],
        );
        assert!(ok.is_ok(), "{ok:?}");
        assert!(ExperimentConfig::from_json(BASE, &["method=sdub".into()]).is_err());
        assert!(ExperimentConfig::from_json(BASE, &["allowed_ratio=1.0".into()]).is_err());
        assert!(ExperimentConfig::from_json("{", &[]).is_err());
    }

    #[test]
    fn override_syntax() {
        let mut v = serde_json::json!({"a": {"b": 1}});
        apply_override(&mut v, "a.c=\"x\"").unwrap();
        apply_override(&mut v, "a.d=plain").unwrap();
        assert_eq!(v, serde_json::json!({"a": {"b": 1, "c": "x", "d": "plain"}}));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "a.b.c=1").is_err());
    }
}
