use std::path::PathBuf;

use mba_core::MbaError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint does not fit the data: {0}")]
    Mismatch(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] MbaError),
}

impl CliError {
    /// 2 for invalid input, 3 for numeric blow-ups, 4 for a checkpoint that
    /// does not fit the data, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Mismatch(_) => 4,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                MbaError::Parameter(_) | MbaError::Configuration(_) | MbaError::Generation(_) => 2,
                MbaError::Numeric(_) | MbaError::DegenerateDistribution => 3,
                MbaError::Checkpoint(_) => 4,
                _ => 1,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
