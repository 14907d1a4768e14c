//! `xbarprune`: train, prune, fine-tune and analyze crossbar-tiled networks.
//!
//! Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "xbarprune", version, about = "Crossbar-aware pruning for ADC-efficient analog accelerators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a configuration value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Regularized training of the configured method; writes model.xbw and history CSVs.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Prunes a trained checkpoint; writes pruned.xbw and plan.json.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Input checkpoint [default: <output_dir>/model.xbw].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrains the surviving weights of a pruned checkpoint; writes finetuned.xbw.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Input checkpoint [default: <output_dir>/pruned.xbw].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Tile sparsity histogram and ADC energy report of a checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Checks tiled MVM against the dense product and the ADC precision bound.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prune plan whose tile levels set the ADC budgets [default: levels read off the weights].
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Random input vectors per layer.
        #[arg(long, default_value_t = 8)]
        inputs: usize,
    },
    /// Comparison table over checkpoints or energy reports.
    Report {
        #[command(flatten)]
        common: Common,
        /// `label=path`, a checkpoint or an analyze energy JSON; the first is the reference.
        #[arg(long = "input", value_name = "LABEL=PATH", required = true)]
        inputs: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match xbarprune::configure_threads().and_then(|_| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("xbarprune: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> xbarprune::Result<()> {
    match command {
        Command::Train { common } => commands::train(&common),
        Command::Prune { common, checkpoint } => commands::prune(&common, checkpoint),
        Command::Finetune { common, checkpoint } => commands::finetune(&common, checkpoint),
        Command::Analyze { common, checkpoint } => commands::analyze(&common, &checkpoint),
        Command::Simulate {
            common,
            checkpoint,
            plan,
            inputs,
        } => commands::simulate(&common, &checkpoint, plan.as_deref(), inputs),
        Command::Report { common, inputs } => commands::report(&common, &inputs),
    }
}
