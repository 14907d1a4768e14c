//! Crossbar-aware pruning: tiling, tile sparsity statistics, training
//! regularizers, per-tile pruning and ADC energy accounting.

pub mod data;
pub mod energy;
pub mod error;
pub mod io;
pub mod levels;
pub mod nnet;
pub mod pipeline;
pub mod prune;
pub mod regularize;
pub mod simcheck;
pub mod sparsity;
pub mod tiling;

pub use error::{Error, Result};
pub use levels::{Level, SparsityLevelSet};
pub use prune::PruneMask;
pub use tiling::{partition, unflatten, LayerMatrix, LayerShape, TileGrid};
pub use io::{Checkpoint, ExperimentConfig, Method};
pub use nnet::{Architecture, LayerSpec, Network, TrainSpec};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "XBARPRUNE_THREADS";

/// Sizes the global rayon pool from `XBARPRUNE_THREADS` when it is set.
/// Returns the thread count in effect. Results never depend on it.
pub fn configure_threads() -> Result<usize> {
    if let Ok(raw) = std::env::var(THREADS_ENV) {
        let n: usize = raw
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
        // a pool may already exist when embedded; keep it
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}
