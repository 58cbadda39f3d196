//! Experiment runner for the directed polymer laboratory: configuration,
//! dispatch, CSV and manifest output.

pub mod config;
pub mod output;
pub mod runner;
pub mod thresholds;

pub use config::{ConfigBuilder, ConfigError, Experiment, ExperimentConfig, Origin};
pub use runner::{run, RunError, RunOutcome};
