use std::path::PathBuf;

use thiserror::Error;

/// Library-wide error type.
///
/// The CLI maps these onto process exit codes: configuration problems
/// exit 2, data/file problems 3, divergence 4, protocol violations 5.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("label {label} out of range [0, {num_classes}) at index {index}")]
    InvalidLabel {
        label: usize,
        num_classes: usize,
        index: usize,
    },

    #[error("no remaining units: sweep index {s} >= unit count {n}")]
    NoRemainingUnits { s: usize, n: usize },

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("malformed record {index} in {path}: {reason}")]
    MalformedRecord {
        path: PathBuf,
        index: usize,
        reason: String,
    },

    #[error("dataset inconsistency: {0}")]
    Inconsistency(String),

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iter}: loss = {loss}")]
    Divergence { iter: usize, loss: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("csv parse error at line {line}: {reason}")]
    CsvParse { line: usize, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI error contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) | Error::InvalidInput(_) => 2,
            Error::MalformedFile { .. }
            | Error::MalformedRecord { .. }
            | Error::Inconsistency(_)
            | Error::CorruptCheckpoint { .. }
            | Error::Io { .. }
            | Error::CsvParse { .. } => 3,
            Error::Divergence { .. } => 4,
            Error::ProtocolViolation(_) => 5,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
