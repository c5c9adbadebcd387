//! Experiment runner behind the `simcl` binary: config parsing, run
//! execution and report aggregation.

pub mod config;
pub mod report;
pub mod runner;

use std::path::Path;

pub use config::{ConfigError, ExperimentConfig, ExperimentKind};
pub use report::{report, ReportBundle};
pub use runner::{run_experiment, RunOptions, Summary};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {message}")]
    Config { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("seed {seed}: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<CliError>,
    },

    #[error(transparent)]
    Core(#[from] simcl_core::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn with_seed(self, seed: u64) -> Self {
        CliError::Seed { seed, source: Box::new(self) }
    }

    pub fn config(path: &Path, e: ConfigError) -> Self {
        CliError::Config { path: path.display().to_string(), message: e.to_string() }
    }

    /// 2 for bad input, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 2,
            CliError::Seed { source, .. } => source.exit_code(),
            CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }
}
