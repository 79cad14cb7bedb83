//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("{op}: dimension mismatch: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },
    /// A caller broke an API contract (bad label id, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A value left the domain an operation is defined on (NaN, log of
    /// a non-positive number, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// Malformed binary or text input.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    /// Malformed config file.
    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },
    /// Filesystem failure, tagged with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Checkpoint contents incompatible with the requested model.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: fmt_shape(lhs),
            rhs: fmt_shape(rhs),
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code for the CLI: IO and parse failures are 3,
    /// everything else that reaches main is a failed check (2).
    /// Usage errors (1) are handled by the argument parser.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Parse { .. }
            | Error::Config { .. }
            | Error::Io { .. }
            | Error::Checkpoint(_) => 3,
            _ => 2,
        }
    }
}

/// "2x3x4" style shape rendering for error messages.
pub fn fmt_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".to_string();
    }
    shape
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("x")
}
