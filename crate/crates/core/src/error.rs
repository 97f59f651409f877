//! Crate-wide error type.

use std::path::PathBuf;

/// Result alias used by every fallible operation in this crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A numeric or structural precondition was violated.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An operation that needs at least one element received none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// An index referred outside its collection.
    #[error("index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },

    /// Two inputs that must agree in length did not.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The simulated correlation grid is too sparse to build a dictionary.
    #[error(
        "insufficient grid coverage: consecutive mean correlations differ by \
         {max_gap:.4}, limit is {limit:.2}"
    )]
    InsufficientGrid { max_gap: f64, limit: f64 },

    /// Calibration target lies outside the achievable correlation range.
    #[error(
        "target correlation {target:.4} is not bracketed: the zero-noise \
         ceiling is {ceiling:.4}"
    )]
    NonBracketing { target: f64, ceiling: f64 },

    /// A delimited or structured text file failed to parse.
    #[error("parse error in {path} at row {row}, column {col}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        col: usize,
        message: String,
    },

    /// A dataset has too few rows for the requested split.
    #[error("insufficient rows: need {needed}, have {available} (resampling disabled)")]
    InsufficientRows { needed: usize, available: usize },

    /// An experiment configuration is structurally invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A failure inside an experiment run, annotated with the round it
    /// occurred in.
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    /// An I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn at_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }
}
