use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("ordering error: {0}")]
    Ordering(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("numerical fault at step {step}: {message}")]
    Numerical { step: u64, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for faults that map to the "numerical" exit code.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
