use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::action::ParseError;
use crate::grpo::GrpoError;
use crate::policy::PolicyError;
use crate::synthweb::{EnvError, SiteError};

/// Crate-level error for file formats, configuration and orchestration.
/// Module-local errors convert into it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },
    #[error("corrupt record at line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },
    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("suite mismatch: {0}")]
    SuiteMismatch(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

impl From<SiteError> for Error {
    fn from(e: SiteError) -> Self {
        match e {
            SiteError::InvalidParams(m) => Error::InvalidParams(m),
            SiteError::Malformed(m) => Error::InvalidParams(m),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
