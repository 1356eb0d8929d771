//! Experiment runner: dataset generation, training, evaluation, ablation
//! and baseline comparison, each leaving a manifest that reproduces it.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod metrics;

pub use commands::{cmd_ablate, cmd_baseline, cmd_eval, cmd_generate, cmd_train};
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
pub use manifest::Manifest;
pub use metrics::{MethodEntry, MetricsFile};
