//! Experiment runner for the FedDM simulator.

pub mod commands;
pub mod config;
pub mod experiment;

pub use config::{parse_config, ConfigError, ExperimentConfig};
pub use experiment::{execute, run_experiment, Failure, Manifest};
