use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Parameter(String),

    #[error("{0}")]
    Model(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parameter(_) => 2,
            CliError::Model(_) => 3,
            CliError::Io { .. } | CliError::Format { .. } => 4,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

impl From<mbnla::Error> for CliError {
    fn from(e: mbnla::Error) -> Self {
        use mbnla::Error as E;
        match e {
            E::InvalidParameter(_) | E::GainExceedsBound { .. } | E::AlreadyFiltered(_) | E::MemoryBudget { .. } => {
                CliError::Parameter(e.to_string())
            }
            _ => CliError::Model(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
