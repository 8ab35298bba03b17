use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the auditor.
#[derive(Debug, Error)]
pub enum AuditError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("unknown format version {0:?}")]
    FormatVersion(String),

    /// A stored array does not have the byte length its manifest implies.
    #[error("{array} length mismatch: expected {expected}, got {actual}")]
    LengthMismatch {
        array: String,
        expected: usize,
        actual: usize,
    },

    /// First error-severity entry of a validation report.
    #[error("invalid dump: {0}")]
    InvalidDump(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("{0}")]
    MissingLabels(String),

    #[error("{0}")]
    MissingHead(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, AuditError>;

impl AuditError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AuditError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for AuditError {
    fn from(e: serde_json::Error) -> Self {
        AuditError::Serde(e.to_string())
    }
}

impl From<csv::Error> for AuditError {
    fn from(e: csv::Error) -> Self {
        AuditError::Serde(e.to_string())
    }
}
