use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid label {value} at (row {row}, col {col}); labels must be 0..=5")]
    InvalidLabel { row: usize, col: usize, value: u8 },
    #[error("non-finite value in {0}")]
    Numeric(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("mask contains no nodule pixels")]
    NoNoduleRegion,
    #[error("no overlapping ids between the two sets: {0}")]
    Pairing(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

/// Fails with [`Error::Numeric`] naming `what` unless `v` is finite.
pub fn ensure_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} = {v}")))
    }
}
