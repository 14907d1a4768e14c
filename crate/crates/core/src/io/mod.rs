//! Persistence and configuration.

pub mod checkpoint;
pub mod config;
pub mod idx;

pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, Method};
pub use idx::load_idx;
