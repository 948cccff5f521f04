use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the estimation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("matrix is not positive definite (leading minor {minor} failed, pivot {pivot:e})")]
    NotPositiveDefinite { minor: usize, pivot: f64 },

    #[error("iteration diverged: {0}; try a better starting value")]
    Divergence(String),

    #[error("rank deficient: rank {rank} < {required}")]
    RankDeficient { rank: usize, required: usize },

    #[error("degenerate monitoring reference: df = {0}")]
    DegenerateReference(i64),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unsupported state file version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("corrupt state file: {0}")]
    Corrupt(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Coarse classification used by the service and CLI for status and exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse { .. } => ErrorKind::Parse,
            Error::UnsupportedVersion { .. } => ErrorKind::StateVersion,
            Error::Corrupt(_) => ErrorKind::StateCorrupt,
            Error::Io { .. } => ErrorKind::Io,
            Error::Dimension(_) | Error::Invalid(_) => ErrorKind::Invalid,
            Error::NonFinite(_)
            | Error::NotPositiveDefinite { .. }
            | Error::Divergence(_)
            | Error::RankDeficient { .. }
            | Error::DegenerateReference(_) => ErrorKind::Numerical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    Parse,
    Invalid,
    Numerical,
    StateVersion,
    StateCorrupt,
    Io,
}

pub type Result<T> = std::result::Result<T, Error>;
