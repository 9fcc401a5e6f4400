//! Batch driver: configs in, reports and artifacts out.

pub mod config;
pub mod experiments;
pub mod report;

pub use config::{parse_config, ExperimentConfig, ExperimentKind};
pub use experiments::{experiment_registry, run_experiment, Experiment};
pub use report::{write_report, Check, RunReport};
