//! Method pipelines: regularized training, pruning and fine-tuning.

use std::path::Path;

use serde::Serialize;

use crate::data::Dataset;
use crate::energy::{EnergyReport, Savings};
use crate::error::{Error, Result};
use crate::io::config::{ExperimentConfig, Method};
use crate::nnet::{Network, TrainSpec, History};
use crate::prune::{
    layer_threshold, prune_layer_per_tile, prune_structured, prune_unstructured, LayerPlan, PruneMask, PrunePlan,
};
use crate::regularize::{Grouping, RegCoefficients};
use crate::sparsity::{histogram, TileHistogram};
use crate::tiling::{partition, LayerMatrix};

/// How a method removes weights after training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneStep {
    None,
    Unstructured,
    PerTile,
    Structured(Grouping),
}

impl Method {
    pub fn prune_step(self) -> PruneStep {
        match self {
            Method::Baseline => PruneStep::None,
            Method::Unstructured => PruneStep::Unstructured,
            Method::Dub | Method::StructuredPerTile | Method::Sdub => PruneStep::PerTile,
            m => PruneStep::Structured(m.structure().expect("structured method")),
        }
    }
}

/// Threshold ratio for per-tile pruning of a layer that already lost
/// `removed` of its weights, so the total stays within `allowed`.
pub fn remaining_ratio(allowed: f64, removed: f64) -> f64 {
    if removed >= allowed || removed >= 1.0 {
        0.0
    } else {
        (allowed - removed) / (1.0 - removed)
    }
}

/// Prunes every layer with `step`; `ratio` gives each layer's allowed ratio.
/// Existing masks are respected and only ever tightened.
pub fn prune_layers(
    layers: &[(LayerMatrix, Option<PruneMask>)],
    step: PruneStep,
    ratio: impl Fn(&str) -> f64,
    tile_size: usize,
) -> Result<(Vec<Option<PruneMask>>, PrunePlan)> {
    let mut masks = Vec::with_capacity(layers.len());
    let mut plan = PrunePlan {
        tile_size,
        layers: Vec::with_capacity(layers.len()),
    };
    for (m, mask) in layers {
        let r = ratio(m.name());
        let (new_mask, layer_plan) = match step {
            PruneStep::None => (
                mask.clone(),
                LayerPlan {
                    name: m.name().to_string(),
                    allowed_ratio: 0.0,
                    threshold: 0.0,
                    tiles: Vec::new(),
                },
            ),
            PruneStep::Unstructured => {
                let threshold = layer_threshold(m, mask.as_ref(), r)?;
                (
                    Some(prune_unstructured(m, mask.as_ref(), r)?),
                    LayerPlan {
                        name: m.name().to_string(),
                        allowed_ratio: r,
                        threshold,
                        tiles: Vec::new(),
                    },
                )
            }
            PruneStep::PerTile => {
                let removed = mask.as_ref().map_or(0.0, PruneMask::pruned_fraction);
                let (mk, mut lp) = prune_layer_per_tile(m, mask.as_ref(), remaining_ratio(r, removed), tile_size)?;
                lp.allowed_ratio = r;
                (Some(mk), lp)
            }
            PruneStep::Structured(g) => (
                Some(prune_structured(m, mask.as_ref(), tile_size, g, r)?),
                LayerPlan {
                    name: m.name().to_string(),
                    allowed_ratio: r,
                    threshold: 0.0,
                    tiles: Vec::new(),
                },
            ),
        };
        masks.push(new_mask);
        plan.layers.push(layer_plan);
    }
    Ok((masks, plan))
}

/// Tile histogram and energy report of a set of (masked) layers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Analysis {
    pub histogram: TileHistogram,
    pub report: EnergyReport,
}

pub fn analyze(layers: &[(LayerMatrix, Option<PruneMask>)], tile_size: usize) -> Result<Analysis> {
    let refs: Vec<(&LayerMatrix, Option<&PruneMask>)> = layers.iter().map(|(m, k)| (m, k.as_ref())).collect();
    let report = EnergyReport::from_layers(&refs, tile_size)?;
    let grids = layers
        .iter()
        .map(|(m, k)| {
            let mut masked = m.clone();
            if let Some(k) = k {
                k.apply(&mut masked);
            }
            partition(&masked, tile_size)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Analysis {
        histogram: histogram(&grids)?,
        report,
    })
}

pub fn network_layers(net: &Network) -> Vec<(LayerMatrix, Option<PruneMask>)> {
    net.params().map(|p| (p.weights.clone(), p.mask.clone())).collect()
}

/// Result of a method's training stage.
#[derive(Debug, Clone)]
pub struct Trained {
    pub network: Network,
    /// Named training histories in the order they ran.
    pub histories: Vec<(String, History)>,
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub network: Network,
    pub plan: PrunePlan,
    pub histories: Vec<(String, History)>,
    pub accuracy_before_finetune: f64,
    pub accuracy: f64,
    pub analysis: Analysis,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub seed: u64,
    pub accuracy_before_finetune: f64,
    pub accuracy: f64,
    pub normalized_energy: f64,
    pub savings: Savings,
    pub final_pruning_ratio: f64,
    pub tiles_at_least_75: f64,
    pub tiles_removed: f64,
}

impl MethodResult {
    pub fn summary(&self, seed: u64) -> MethodSummary {
        let h = &self.analysis.histogram;
        MethodSummary {
            method: self.method.label().to_string(),
            seed,
            accuracy_before_finetune: self.accuracy_before_finetune,
            accuracy: self.accuracy,
            normalized_energy: self.analysis.report.normalized_energy,
            savings: self.analysis.report.savings_ratio,
            final_pruning_ratio: self.analysis.report.final_pruning_ratio,
            tiles_at_least_75: h.fraction_at_least(0.75),
            tiles_removed: h.fraction_at_least(1.0),
        }
    }
}

/// A configuration bound to its loaded data.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl Experiment {
    /// Loads the configured data; relative paths resolve against `base`.
    pub fn load(config: ExperimentConfig, base: &Path) -> Result<Self> {
        let (train, test) = config.data.load(base)?;
        Self::new(config, train, test)
    }

    pub fn new(config: ExperimentConfig, train: Dataset, test: Option<Dataset>) -> Result<Self> {
        config.validate()?;
        let input = config.architecture.input.len();
        for d in std::iter::once(&train).chain(test.as_ref()) {
            if d.shape.len() != input {
                return Err(Error::Data(format!(
                    "data has {} values per sample, the network expects {input}",
                    d.shape.len()
                )));
            }
        }
        Ok(Experiment { config, train, test })
    }

    pub fn with_method(&self, method: Method) -> Result<Self> {
        let mut config = self.config.clone();
        config.method = method;
        config.train.grouping = method.structure().or(config.train.grouping);
        Experiment::new(config, self.train.clone(), self.test.clone())
    }

    fn held_out(&self) -> &Dataset {
        self.test.as_ref().unwrap_or(&self.train)
    }

    pub fn accuracy(&self, net: &Network) -> Result<f64> {
        net.accuracy(self.held_out())
    }

    pub fn fresh_network(&self) -> Result<Network> {
        Network::new(&self.config.architecture, self.config.train.seed)
    }

    fn spec(&self, reg: RegCoefficients, grouping: Option<Grouping>, epochs: usize) -> TrainSpec {
        TrainSpec {
            reg,
            grouping,
            epochs,
            ..self.config.train
        }
    }

    fn run_train(&self, net: &mut Network, spec: &TrainSpec, name: &str, out: &mut Vec<(String, History)>) -> Result<()> {
        let h = crate::nnet::train(net, &self.train, self.test.as_ref(), spec)?;
        out.push((name.to_string(), h));
        Ok(())
    }

    /// Regularized training of the configured method from a fresh network.
    /// For S-DUB this includes tile removal and the masked DUB stage.
    pub fn train_stage(&self) -> Result<Trained> {
        let cfg = &self.config;
        let l2_only = RegCoefficients {
            lambda_mean: cfg.train.reg.lambda_mean,
            ..RegCoefficients::default()
        };
        let mut net = self.fresh_network()?;
        let mut histories = Vec::new();
        match cfg.method {
            Method::Baseline | Method::Unstructured => {
                self.run_train(&mut net, &self.spec(l2_only, None, cfg.train.epochs), "train", &mut histories)?;
            }
            Method::Dub => {
                let reg = RegCoefficients {
                    lambda_group: 0.0,
                    ..cfg.train.reg
                };
                self.run_train(&mut net, &self.spec(reg, None, cfg.train.epochs), "train", &mut histories)?;
            }
            Method::StructuredColumn | Method::StructuredRow | Method::StructuredTile | Method::StructuredPerTile => {
                let spec = self.spec(cfg.train.reg, cfg.train.grouping, cfg.train.epochs);
                self.run_train(&mut net, &spec, "train", &mut histories)?;
            }
            Method::Sdub => {
                let stage = cfg
                    .structured
                    .ok_or_else(|| Error::Config("method sdub needs a 'structured' section".into()))?;
                let group = RegCoefficients {
                    lambda_mean: cfg.train.reg.lambda_mean,
                    lambda_var: 0.0,
                    lambda_group: stage.lambda_group,
                };
                let epochs = stage.epochs.unwrap_or(cfg.train.epochs);
                self.run_train(&mut net, &self.spec(group, Some(Grouping::Tile), epochs), "structured", &mut histories)?;
                return self.sdub_from(Trained { network: net, histories });
            }
        }
        Ok(Trained { network: net, histories })
    }

    /// Second half of S-DUB: removes whole tiles from a group-lasso trained
    /// network, then runs DUB training on the survivors with masks frozen.
    pub fn sdub_from(&self, structured: Trained) -> Result<Trained> {
        let cfg = &self.config;
        let stage = cfg
            .structured
            .ok_or_else(|| Error::Config("method sdub needs a 'structured' section".into()))?;
        let Trained {
            network: mut net,
            mut histories,
        } = structured;
        let (masks, _) = prune_layers(
            &network_layers(&net),
            PruneStep::Structured(Grouping::Tile),
            |name| stage.ratio.min(cfg.ratio_for(name)),
            cfg.tile_size(),
        )?;
        net.set_masks(masks)?;
        let reg = RegCoefficients {
            lambda_group: 0.0,
            ..cfg.train.reg
        };
        self.run_train(&mut net, &self.spec(reg, None, cfg.train.epochs), "train", &mut histories)?;
        Ok(Trained { network: net, histories })
    }

    pub fn prune_stage(&self, net: &Network) -> Result<(Vec<Option<PruneMask>>, PrunePlan)> {
        prune_layers(
            &network_layers(net),
            self.config.method.prune_step(),
            |name| self.config.ratio_for(name),
            self.config.tile_size(),
        )
    }

    /// Fine-tunes surviving weights with frozen masks.
    pub fn finetune_stage(&self, net: &mut Network, masks: Vec<Option<PruneMask>>) -> Result<History> {
        crate::nnet::finetune(net, masks, &self.train, self.test.as_ref(), &self.config.train)
    }

    /// Prunes and fine-tunes an already trained network.
    pub fn finish(&self, trained: Trained) -> Result<MethodResult> {
        let Trained {
            mut network,
            mut histories,
        } = trained;
        let (masks, plan) = self.prune_stage(&network)?;
        let accuracy_before_finetune = if self.config.method == Method::Baseline {
            self.accuracy(&network)?
        } else {
            let mut probe = network.clone();
            probe.set_masks(masks.clone())?;
            self.accuracy(&probe)?
        };
        if self.config.method != Method::Baseline {
            let h = self.finetune_stage(&mut network, masks)?;
            histories.push(("finetune".into(), h));
        }
        let accuracy = self.accuracy(&network)?;
        let analysis = analyze(&network_layers(&network), self.config.tile_size())?;
        Ok(MethodResult {
            method: self.config.method,
            network,
            plan,
            histories,
            accuracy_before_finetune,
            accuracy,
            analysis,
        })
    }

    pub fn run(&self) -> Result<MethodResult> {
        self.finish(self.train_stage()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: &str = r#"{
        "data": {"source": "synthetic", "classes": 3, "shape": {"channels": 4, "height": 6, "width": 6},
                 "count": 48, "test_count": 24, "separation": 1.0, "noise": 1.0, "seed": 1},
        "architecture": {"input": {"channels": 4, "height": 6, "width": 6},
                         "layers": [{"kind": "conv", "filters": 8, "kernel": 3}, {"kind": "relu"},
                                    {"kind": "max_pool"}, {"kind": "flatten"}, {"kind": "dense", "units": 3}]},
        "train": {"learning_rate": 0.02, "batch_size": 8, "epochs": 2, "tile_size": 4, "seed": 0,
                  "finetune_epochs": 1, "reg": {"lambda_mean": 1e-4}},
        "method": "baseline",
        "allowed_ratio": 0.6
    }"#;

    fn exp(overrides: &[&str]) -> Experiment {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        let cfg = ExperimentConfig::from_json(CFG, &o).unwrap();
        Experiment::load(cfg, Path::new(".")).unwrap()
    }

    #[test]
    fn baseline_is_dense() {
        let r = exp(&[]).run().unwrap();
        assert_eq!(r.analysis.report.normalized_energy, 1.0);
        assert!(r.network.params().all(|p| p.mask.is_none()));
    }

    #[test]
    fn every_method_runs_within_budget() {
        for m in ["unstructured", "dub", "structured-column", "structured-row", "structured-tile", "structured+pertile", "sdub"] {
            let mut o = vec![format!("method={m}")];
            match m {
                "dub" => o.push("train.reg.lambda_var=0.01".into()),
                "sdub" => {
                    o.push("train.reg.lambda_var=0.01".into());
                    o.push(r#"structured={"lambda_group":0.01,"ratio":0.3}"#.into());
                }
                "unstructured" => {}
                "structured+pertile" => {
                    o.push("train.reg.lambda_group=0.01".into());
                    o.push("train.grouping=column".into());
                }
                _ => o.push("train.reg.lambda_group=0.01".into()),
            }
            let refs: Vec<&str> = o.iter().map(String::as_str).collect();
            let r = exp(&refs).run().unwrap();
            for (layer, p) in r.network.params().enumerate() {
                let mask = p.mask.as_ref().unwrap_or_else(|| panic!("{m}: layer {layer} unmasked"));
                if r.method.prune_step() != PruneStep::PerTile {
                    assert!(mask.pruned_fraction() <= 0.6 + 1e-9, "{m}: {}", mask.pruned_fraction());
                }
                for (i, &w) in p.weights.values().iter().enumerate() {
                    if !mask.keep(i) {
                        assert_eq!(w, 0.0);
                    }
                }
            }
            assert!(r.analysis.report.normalized_energy <= 1.0);
        }
    }

    #[test]
    fn remaining_ratio_keeps_total() {
        assert_eq!(remaining_ratio(0.5, 0.0), 0.5);
        assert_eq!(remaining_ratio(0.5, 0.6), 0.0);
        let r = remaining_ratio(0.8, 0.5);
        assert!((0.5 + 0.5 * r - 0.8).abs() < 1e-12);
    }
}
