//! Command surface for training, evaluating, gradient-checking, and analyzing
//! localness encoders, plus the config, checkpoint, and CSV/JSON formats.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod diagnostics;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("{0}")]
    Divergence(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    /// 0 success, 1 check failure, 2 usage/config error, 3 runtime divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Check(_) => 1,
            Self::Usage(_) | Self::Io(_) => 2,
            Self::Divergence(_) => 3,
        }
    }
}

impl From<localness::Error> for CliError {
    fn from(e: localness::Error) -> Self {
        match e {
            localness::Error::Divergence { .. } | localness::Error::Range(_) => Self::Divergence(e.to_string()),
            other => Self::Usage(other.to_string()),
        }
    }
}
