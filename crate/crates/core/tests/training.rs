//! Behavioral checks on training and fine-tuning that need whole runs.

use std::path::Path;

use xbarprune::pipeline::Experiment;
use xbarprune::ExperimentConfig;

const CONFIG: &str = r#"{
    "data": {"source": "synthetic", "classes": 4, "shape": {"channels": 4, "height": 6, "width": 6},
             "count": 256, "test_count": 256, "seed": 11},
    "architecture": {"input": {"channels": 4, "height": 6, "width": 6},
                     "layers": [{"kind": "conv", "filters": 16, "kernel": 3}, {"kind": "relu"},
                                {"kind": "max_pool"}, {"kind": "flatten"}, {"kind": "dense", "units": 4}]},
    "train": {"learning_rate": 0.01, "batch_size": 16, "epochs": 6, "tile_size": 8, "seed": 0,
              "finetune_epochs": 4, "reg": {"lambda_mean": 1e-4}},
    "method": "baseline",
    "allowed_ratio": 0.8
}"#;

fn experiment(overrides: &[&str]) -> Experiment {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    let cfg = ExperimentConfig::from_json(CONFIG, &o).unwrap();
    Experiment::load(cfg, Path::new(".")).unwrap()
}

#[test]
fn variance_term_shrinks_tile_variance() {
    let plain = experiment(&["method=unstructured"]).train_stage().unwrap();
    let gated = experiment(&["method=dub", "train.reg.lambda_var=0.05"]).train_stage().unwrap();
    let last = |t: &xbarprune::pipeline::Trained| {
        t.histories.last().unwrap().1.epochs.last().unwrap().mean_tile_variance()
    };
    let (a, b) = (last(&plain), last(&gated));
    assert!(b < a, "variance with the gated term {b} vs without {a}");
    let gated_history = &gated.histories.last().unwrap().1.epochs;
    assert!(gated_history.last().unwrap().var_reg < gated_history.first().unwrap().var_reg);
}

#[test]
fn finetuning_recovers_accuracy() {
    let mut gains = Vec::new();
    for seed in 0..3 {
        let s = format!("train.seed={seed}");
        let r = experiment(&["method=unstructured", &s]).run().unwrap();
        gains.push(r.accuracy - r.accuracy_before_finetune);
    }
    assert!(gains.iter().all(|&g| g >= 0.0), "{gains:?}");
    assert!(gains.iter().sum::<f64>() > 0.0, "{gains:?}");
}

#[test]
fn pruned_weights_stay_zero_through_finetuning() {
    let r = experiment(&["method=dub", "train.reg.lambda_var=0.01"]).run().unwrap();
    for p in r.network.params() {
        let mask = p.mask.as_ref().unwrap();
        for (i, &w) in p.weights.values().iter().enumerate() {
            if !mask.keep(i) {
                assert_eq!(w.to_bits(), 0.0f64.to_bits());
            }
        }
    }
    assert!(r.analysis.report.normalized_energy < 1.0);
}
