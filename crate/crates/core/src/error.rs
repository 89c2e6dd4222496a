use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Variants split into two classes: validation problems with user input
/// (bad files, bad configuration, empty queries) and internal failures.
/// [`Error::is_validation`] tells them apart for the CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("non-deterministic function: {0}")]
    Determinism(String),

    #[error("gradient check failed: max relative error {0:.3e}")]
    GradientCheck(f64),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty query")]
    EmptyQuery,

    #[error("invalid cell ({a}, {b}) for map of side {n}")]
    InvalidCell { a: usize, b: usize, n: usize },

    #[error("invalid span [{start}, {end}]")]
    InvalidSpan { start: f64, end: f64 },

    #[error("no valid proposal")]
    NoProposal,

    #[error("optimizer error: missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("validation error in {path} line {line}: {reason}")]
    Validation {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("annotation references unknown video `{0}`")]
    Resolution(String),

    #[error("ingestion error for sample `{id}`: {reason}")]
    Ingestion { id: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a bug or an
    /// environment failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::EmptyQuery
                | Error::InvalidCell { .. }
                | Error::InvalidSpan { .. }
                | Error::NoProposal
                | Error::Format { .. }
                | Error::Validation { .. }
                | Error::Resolution(_)
                | Error::Ingestion { .. }
                | Error::Checkpoint(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
