//! Experiment orchestration for the `tso` command-line tool.

pub mod commands;
pub mod config;
pub mod report;

use std::fmt;
use std::path::{Path, PathBuf};

pub use commands::{ablate_length, run, sensitivity, transfer, Options};
pub use config::{ExperimentConfig, LoadedConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}", ConfigMessage(.path, .at, .message))]
    Config {
        path: PathBuf,
        at: Option<(usize, usize)>,
        message: String,
    },
    #[error("{0}")]
    Runtime(String),
}

struct ConfigMessage<'a>(&'a PathBuf, &'a Option<(usize, usize)>, &'a String);

impl fmt::Display for ConfigMessage<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.1 {
            Some((line, col)) => write!(f, "{}:{line}:{col}: {}", self.0.display(), self.2),
            None => write!(f, "{}: {}", self.0.display(), self.2),
        }
    }
}

impl CliError {
    pub fn config(path: &Path, at: Option<(usize, usize)>, message: impl Into<String>) -> Self {
        Self::Config {
            path: path.to_path_buf(),
            at,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl From<tso_core::TsoError> for CliError {
    fn from(e: tso_core::TsoError) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}
