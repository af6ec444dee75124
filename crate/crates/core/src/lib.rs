//! Bias-mitigation training: configs, datasets, models, mitigation methods,
//! fairness metrics and run tooling.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod mitigation;
pub mod modeling;
pub mod registry;
pub mod seed;
pub mod tooling;

pub use config::{load_config, load_config_str, ExperimentConfig};
pub use error::{Error, Result};
pub use experiment::{evaluate_checkpoint, run_experiment};
pub use mitigation::{RunOptions, RunOutcome};
