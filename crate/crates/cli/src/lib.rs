//! Command-line runner for measurement-based noiseless linear amplification
//! experiments: simulate records, post-select them, and report entanglement
//! criteria, key rates and normality diagnostics.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod record_file;
pub mod report;

pub use error::{CliError, CliResult};
