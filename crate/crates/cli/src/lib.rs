//! Orchestration and file I/O for the `nbafl` command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{ExperimentConfig, Resolved};
pub use error::CliError;
