//! Batch experiment runner: JSON configs in, JSON and CSV reports out.

pub mod build;
pub mod config;
pub mod error;
pub mod report;
pub mod scenarios;

pub use config::{ExperimentConfig, Scenario, ScenarioParams};
pub use error::{CliError, Result};
pub use report::{emit_report, ReportBundle};
pub use scenarios::run_config;
