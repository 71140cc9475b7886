//! Experiment harness around the `amskv-core` cache policies: TOML configs,
//! parallel runs, reports rebuilt from traces, and the built-in presets.

pub mod commands;
pub mod config;
pub mod error;
pub mod presets;
pub mod report;

pub use config::{ExperimentConfig, ReportFormat};
pub use error::CliError;
pub use report::RunReport;
