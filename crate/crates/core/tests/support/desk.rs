//! Desk-scale comparison: baseline, unstructured, DUB, structured-tile and
//! S-DUB on a small conv net over synthetic image-shaped data.

use std::path::Path;

use xbarprune::io::config::{ExperimentConfig, Method};
use xbarprune::pipeline::{Experiment, MethodResult, MethodSummary};
use xbarprune::Result;

/// Two conv layers and one dense layer; every weight layer spans at least
/// three 32x32 tiles and every tile row has more than 16 valid rows.
pub const CONFIG: &str = r#"{
    "data": {"source": "synthetic", "classes": 10,
             "shape": {"channels": 3, "height": 6, "width": 6},
             "count": 1000, "test_count": 1000, "separation": 1.0, "noise": 1.0, "seed": 0},
    "architecture": {"input": {"channels": 3, "height": 6, "width": 6},
                     "layers": [{"kind": "conv", "filters": 96, "kernel": 3}, {"kind": "relu"},
                                {"kind": "max_pool"},
                                {"kind": "conv", "filters": 32, "kernel": 2}, {"kind": "relu"},
                                {"kind": "flatten"}, {"kind": "dense", "units": 10}]},
    "train": {"learning_rate": 0.01, "momentum": 0.9, "batch_size": 32, "epochs": 12,
              "lr_decay": 0.3, "lr_step": 8, "tile_size": 32, "seed": 0,
              "finetune_epochs": 16, "finetune_learning_rate": 0.02,
              "reg": {"lambda_mean": 1e-4, "lambda_var": 0.005, "lambda_group": 0.0}},
    "method": "baseline",
    "allowed_ratio": 0.8,
    "structured": {"lambda_group": 0.1, "ratio": 0.8}
}"#;

pub fn config(seed: u64, extra: &[String]) -> Result<ExperimentConfig> {
    let mut o = vec![
        format!("train.seed={seed}"),
        format!("data.seed={}", 1000 + seed),
    ];
    o.extend(extra.iter().cloned());
    // baseline validation rejects coefficients meant for other methods
    let mut cfg = ExperimentConfig::from_json(&CONFIG.replace("\"method\": \"baseline\"", "\"method\": \"sdub\""), &o)?;
    cfg.method = Method::Baseline;
    Ok(cfg)
}

fn for_method(base: &ExperimentConfig, method: Method) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.method = method;
    match method {
        Method::Baseline | Method::Unstructured => {
            cfg.train.reg.lambda_var = 0.0;
            cfg.structured = None;
        }
        Method::Dub => cfg.structured = None,
        Method::StructuredTile => {
            cfg.train.reg.lambda_var = 0.0;
            // same group-lasso stage as the first half of S-DUB
            cfg.train.reg.lambda_group = base.structured.expect("desk config has a structured stage").lambda_group;
            cfg.train.grouping = method.structure();
            cfg.structured = None;
        }
        Method::Sdub => {}
        _ => unreachable!("not part of the desk comparison"),
    }
    cfg
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub baseline: MethodSummary,
    pub unstructured: MethodSummary,
    pub dub: MethodSummary,
    pub tile: MethodSummary,
    pub sdub: MethodSummary,
}

impl SeedOutcome {
    pub fn all(&self) -> [&MethodSummary; 5] {
        [&self.baseline, &self.unstructured, &self.dub, &self.tile, &self.sdub]
    }
}

/// Runs all five methods for one seed. Baseline and unstructured share one
/// training run, as do structured-tile and the first S-DUB stage.
pub fn run_seed(seed: u64, extra: &[String]) -> Result<(SeedOutcome, Vec<MethodResult>)> {
    let base = config(seed, extra)?;
    let load = |m: Method| -> Result<Experiment> {
        let cfg = for_method(&base, m);
        let (train, test) = cfg.data.load(Path::new("."))?;
        Experiment::new(cfg, train, test)
    };
    let baseline_exp = load(Method::Baseline)?;
    let dense = baseline_exp.train_stage()?;
    let baseline = baseline_exp.finish(dense.clone())?;
    let unstructured = load(Method::Unstructured)?.finish(dense)?;
    let dub = load(Method::Dub)?.run()?;
    let tile_exp = load(Method::StructuredTile)?;
    let tile_trained = tile_exp.train_stage()?;
    let tile = tile_exp.finish(tile_trained.clone())?;
    let sdub_exp = load(Method::Sdub)?;
    let sdub = sdub_exp.finish(sdub_exp.sdub_from(tile_trained)?)?;
    let outcome = SeedOutcome {
        baseline: baseline.summary(seed),
        unstructured: unstructured.summary(seed),
        dub: dub.summary(seed),
        tile: tile.summary(seed),
        sdub: sdub.summary(seed),
    };
    Ok((outcome, vec![baseline, unstructured, dub, tile, sdub]))
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
