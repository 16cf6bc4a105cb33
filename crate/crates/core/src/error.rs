//! Error type shared across the toolkit.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, AuditError>;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("invalid manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    /// A malformed record, reported with file and row context.
    #[error("{file}, row {row}: {reason}")]
    BadRecord {
        file: String,
        row: usize,
        reason: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown modality '{0}'")]
    UnknownModality(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("insufficient diversity: {0}")]
    InsufficientDiversity(String),

    #[error("insufficient errors: {0}")]
    InsufficientErrors(String),

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("no reference samples: {0}")]
    NoReferenceSamples(String),

    #[error("empty slice: {0}")]
    EmptySlice(String),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("missing attribute '{attr}': {reason}")]
    MissingAttribute { attr: String, reason: String },

    #[error("missing vector for '{0}'")]
    MissingVector(String),

    #[error("infeasible bias target: {0}")]
    Infeasible(String),

    #[error("no valid iterations: {0}")]
    NoValidIterations(String),
}
