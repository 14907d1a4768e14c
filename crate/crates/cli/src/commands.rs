use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use xbarprune::energy::{compare, AdcProfile, EnergyReport, Labeled, TileAdc};
use xbarprune::nnet::History;
use xbarprune::pipeline::{analyze as analyze_layers, network_layers, prune_layers, Experiment};
use xbarprune::prune::PrunePlan;
use xbarprune::simcheck::{check_adc_bound, tiled_mvm, AdcBoundReport};
use xbarprune::{partition, Checkpoint, Error, ExperimentConfig, Network, Result, SparsityLevelSet};

use crate::Common;

/// Relative tolerance of the tiled-versus-dense comparison.
const MVM_TOLERANCE: f64 = 1e-5;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Context {
    config: ExperimentConfig,
    /// Directory relative data paths resolve against.
    base: PathBuf,
    out: PathBuf,
}

impl Context {
    fn new(common: &Common) -> Result<Self> {
        let config = ExperimentConfig::load(&common.config, &common.overrides)?;
        let base = common
            .config
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        // like data paths, a relative output directory follows the config file
        let out = base.join(&config.output_dir);
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        Ok(Context { config, base, out })
    }

    fn experiment(&self) -> Result<Experiment> {
        Experiment::load(self.config.clone(), &self.base)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn network(&self, checkpoint: &Path) -> Result<Network> {
        let ckpt = Checkpoint::load(checkpoint)?;
        let mut net = Network::new(&self.config.architecture, self.config.train.seed)?;
        ckpt.restore(&mut net)?;
        Ok(net)
    }

    fn write(&self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<PathBuf> {
        let path = self.path(name);
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(io_err(&path))?;
        eprintln!("wrote {}", path.display());
        Ok(path)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w).map_err(io_err(Path::new(name)))
        })
    }

    fn save(&self, name: &str, net: &Network) -> Result<PathBuf> {
        let path = self.path(name);
        Checkpoint::from_network(net).save(&path)?;
        eprintln!("wrote {}", path.display());
        Ok(path)
    }

    fn histories(&self, histories: &[(String, History)]) -> Result<()> {
        for (stage, h) in histories {
            let suffix = if stage == "train" { String::new() } else { format!("-{stage}") };
            self.write(&format!("history{suffix}.csv"), |w| h.write_csv(w))?;
            self.write(&format!("tiles{suffix}.csv"), |w| h.write_tiles_csv(w))?;
        }
        Ok(())
    }

    /// Timestamps live only here so every other artifact is reproducible.
    fn meta(&self, command: &str, artifacts: &[PathBuf]) -> Result<()> {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let meta = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "timestamp_unix": secs,
            "threads": xbarprune::configure_threads()?,
            "method": self.config.method,
            "artifacts": artifacts,
        });
        self.write_json(&format!("{command}.meta.json"), &meta)?;
        Ok(())
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

pub fn train(common: &Common) -> Result<()> {
    let ctx = Context::new(common)?;
    let exp = ctx.experiment()?;
    let trained = exp.train_stage()?;
    ctx.histories(&trained.histories)?;
    let acc = exp.accuracy(&trained.network)?;
    eprintln!("{}: accuracy {acc:.4}", ctx.config.method);
    let model = ctx.save("model.xbw", &trained.network)?;
    ctx.meta("train", &[model])
}

pub fn prune(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let ctx = Context::new(common)?;
    let input = checkpoint.unwrap_or_else(|| ctx.path("model.xbw"));
    let mut net = ctx.network(&input)?;
    let cfg = &ctx.config;
    let (masks, plan) = prune_layers(
        &network_layers(&net),
        cfg.method.prune_step(),
        |name| cfg.ratio_for(name),
        cfg.tile_size(),
    )?;
    net.set_masks(masks)?;
    let model = ctx.save("pruned.xbw", &net)?;
    let plan_path = ctx.write_json("plan.json", &plan)?;
    let report = analyze_layers(&network_layers(&net), cfg.tile_size())?.report;
    eprintln!(
        "pruned {:.4} of weights, normalized energy {:.4} ({})",
        report.final_pruning_ratio,
        report.normalized_energy,
        report.savings_ratio.label()
    );
    ctx.meta("prune", &[model, plan_path])
}

pub fn finetune(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let ctx = Context::new(common)?;
    let input = checkpoint.unwrap_or_else(|| ctx.path("pruned.xbw"));
    let mut net = ctx.network(&input)?;
    let exp = ctx.experiment()?;
    let masks = net.masks();
    let history = exp.finetune_stage(&mut net, masks)?;
    ctx.histories(&[("finetune".into(), history)])?;
    eprintln!("fine-tuned accuracy {:.4}", exp.accuracy(&net)?);
    let model = ctx.save("finetuned.xbw", &net)?;
    ctx.meta("finetune", &[model])
}

pub fn analyze(common: &Common, checkpoint: &Path) -> Result<()> {
    let ctx = Context::new(common)?;
    let net = ctx.network(checkpoint)?;
    let analysis = analyze_layers(&network_layers(&net), ctx.config.tile_size())?;
    let name = stem(checkpoint);
    let hist = ctx.write(&format!("{name}.histogram.csv"), |w| analysis.histogram.write_csv(w))?;
    let energy = ctx.write(&format!("{name}.energy.json"), |w| analysis.report.write_json(w))?;
    let layers = ctx.write(&format!("{name}.layers.csv"), |w| analysis.report.write_csv(w))?;
    println!(
        "{name}: normalized energy {:.2}, savings {}, {} tiles",
        analysis.report.normalized_energy,
        analysis.report.savings_ratio.label(),
        analysis.report.total_tiles
    );
    ctx.meta("analyze", &[hist, energy, layers])
}

#[derive(Debug, Serialize)]
struct LayerSimulation {
    name: String,
    tiles: usize,
    inputs: usize,
    max_relative_error: f64,
    equivalent: bool,
    adc_bound: AdcBoundReport,
}

#[derive(Debug, Serialize)]
struct SimulationReport {
    tile_size: usize,
    tolerance: f64,
    budgets_from_plan: bool,
    passed: bool,
    layers: Vec<LayerSimulation>,
}

fn plan_profile(plan: &PrunePlan, layer: &str, grid: &xbarprune::TileGrid) -> Result<Option<AdcProfile>> {
    let Some(lp) = plan.layers.iter().find(|l| l.name == layer) else {
        return Ok(None);
    };
    if lp.tiles.is_empty() {
        return Ok(None);
    }
    if lp.tiles.len() != grid.len() {
        return Err(Error::Mismatch(format!(
            "plan for '{layer}' covers {} tiles, the checkpoint has {}",
            lp.tiles.len(),
            grid.len()
        )));
    }
    let levels = SparsityLevelSet::new(grid.tile_size())?;
    let tiles = lp
        .tiles
        .iter()
        .map(|tp| {
            let (block_row, block_col) = grid.layout.block(tp.index);
            TileAdc {
                index: tp.index,
                block_row,
                block_col,
                max_nnz: tp.keep,
                level: tp.level,
                bits: levels.bits(tp.level),
            }
        })
        .collect();
    Ok(Some(AdcProfile {
        tile_size: grid.tile_size(),
        full_bits: levels.full_bits(),
        tiles,
    }))
}

pub fn simulate(common: &Common, checkpoint: &Path, plan: Option<&Path>, inputs: usize) -> Result<()> {
    let ctx = Context::new(common)?;
    let net = ctx.network(checkpoint)?;
    let n = ctx.config.tile_size();
    let plan: Option<PrunePlan> = match plan {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            let plan: PrunePlan = serde_json::from_str(&text)?;
            if plan.tile_size != n {
                return Err(Error::Mismatch(format!("plan uses tile size {}, config {n}", plan.tile_size)));
            }
            Some(plan)
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.config.train.seed);
    let mut layers = Vec::new();
    for p in net.params() {
        let m = &p.weights;
        let mask = p.mask.as_ref();
        let grid = partition(m, n)?;
        let mut worst: f64 = 0.0;
        for _ in 0..inputs {
            let x: Vec<f64> = (0..m.rows()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let trace = tiled_mvm(&grid, mask, &x)?;
            for (o, &got) in trace.output.iter().enumerate() {
                let (mut dense, mut scale) = (0.0, 0.0);
                for (i, &xi) in x.iter().enumerate() {
                    if mask.is_none_or(|mk| mk.keep(i * m.cols() + o)) {
                        let t = m.get(i, o) * xi;
                        dense += t;
                        scale += t.abs();
                    }
                }
                if got != dense {
                    worst = worst.max((got - dense).abs() / scale.max(f64::MIN_POSITIVE));
                }
            }
        }
        let profile = match plan.as_ref().map(|pl| plan_profile(pl, m.name(), &grid)).transpose()?.flatten() {
            Some(profile) => profile,
            None => {
                let mut masked = m.clone();
                if let Some(mk) = mask {
                    mk.apply(&mut masked);
                }
                AdcProfile::from_grid(&partition(&masked, n)?)?
            }
        };
        layers.push(LayerSimulation {
            name: m.name().to_string(),
            tiles: grid.len(),
            inputs,
            max_relative_error: worst,
            equivalent: worst <= MVM_TOLERANCE,
            adc_bound: check_adc_bound(&grid, mask, &profile)?,
        });
    }
    let equivalent = layers.iter().all(|l| l.equivalent);
    let bounded = layers.iter().all(|l| l.adc_bound.passed());
    let report = SimulationReport {
        tile_size: n,
        tolerance: MVM_TOLERANCE,
        budgets_from_plan: plan.is_some(),
        passed: equivalent && bounded,
        layers,
    };
    let path = ctx.write_json(&format!("{}.simulate.json", stem(checkpoint)), &report)?;
    ctx.meta("simulate", &[path])?;
    for l in &report.layers {
        println!(
            "{}: {} tiles, max relative error {:.1e}, ADC bound {}",
            l.name,
            l.tiles,
            l.max_relative_error,
            if l.adc_bound.passed() { "ok" } else { "VIOLATED" }
        );
    }
    if !equivalent {
        return Err(Error::Numerical(format!(
            "tiled MVM differs from the dense product by more than {MVM_TOLERANCE}"
        )));
    }
    if !bounded {
        return Err(Error::Data("ADC precision bound violated; see the simulate report".into()));
    }
    Ok(())
}

fn is_checkpoint(path: &Path) -> Result<bool> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(bytes.starts_with(xbarprune::io::checkpoint::MAGIC))
}

pub fn report(common: &Common, inputs: &[String]) -> Result<()> {
    let ctx = Context::new(common)?;
    let mut experiment = None;
    let mut entries: Vec<(String, EnergyReport, Option<f64>)> = Vec::new();
    for spec in inputs {
        let (label, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--input '{spec}' is not LABEL=PATH")))?;
        let path = Path::new(path);
        if is_checkpoint(path)? {
            let net = ctx.network(path)?;
            if experiment.is_none() {
                experiment = Some(ctx.experiment()?);
            }
            let acc = experiment.as_ref().expect("loaded above").accuracy(&net)?;
            let report = analyze_layers(&network_layers(&net), ctx.config.tile_size())?.report;
            entries.push((label.to_string(), report, Some(acc)));
        } else {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let report: EnergyReport = serde_json::from_str(&text)?;
            entries.push((label.to_string(), report, None));
        }
    }
    let labeled: Vec<Labeled> = entries
        .iter()
        .map(|(label, report, accuracy)| Labeled {
            label: label.clone(),
            report,
            accuracy: *accuracy,
        })
        .collect();
    let table = compare(&labeled)?;
    table.write_csv(std::io::stdout().lock())?;
    let path = ctx.write("report.csv", |w| table.write_csv(w))?;
    ctx.meta("report", &[path])
}
