//! Experiment runner for debiased recommendation: config parsing with
//! dotted-key overrides, method execution over seed lists, sweeps over
//! methods / bias levels / lambda grids, and report emission.

pub mod config;
pub mod report;
pub mod runner;

pub use config::{ConfigError, DatasetSpec, ExperimentConfig, Method};
pub use report::{emit_report, ExperimentReport, MethodReport, ReportFormat};
pub use runner::{run_experiment, run_sweep, RunError};
