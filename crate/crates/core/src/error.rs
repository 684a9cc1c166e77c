//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Step requested past the end of the exogenous series.
    #[error("series exhausted: step {t} requested but series has {len} entries")]
    SeriesExhausted { t: usize, len: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid action {a}: magnitude exceeds a_max = {a_max}")]
    InvalidAction { a: f64, a_max: f64 },

    #[error("invalid battery parameters: {0}")]
    InvalidParams(String),

    /// SOC or bounds do not sit on the `soc_min + k * a_max` lattice.
    #[error("lattice alignment: {0}")]
    Alignment(String),

    /// Timestamps with a gap or duplicate.
    #[error("timestamp alignment error at line {line}: {msg}")]
    TimestampAlignment { line: usize, msg: String },

    #[error("validation error at line {line}: {msg}")]
    Validation { line: usize, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("size error: {0}")]
    Size(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Operation not allowed in the current object state (unfitted model, stale tape).
    #[error("state error: {0}")]
    State(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// NaN or infinite values where finite numbers are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("missing checkpoint {path}: run `{hint}` first")]
    MissingCheckpoint { path: PathBuf, hint: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::InvalidParams(_)
                | Error::Alignment(_)
                | Error::TimestampAlignment { .. }
                | Error::Validation { .. }
                | Error::Parse { .. }
                | Error::Size(_)
                | Error::Config(_)
                | Error::MissingCheckpoint { .. }
        )
    }
}
