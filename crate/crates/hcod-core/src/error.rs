//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the hcod pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// The byte stream does not parse as the format it claims to be.
    #[error("format error: {0}")]
    Format(String),

    /// Parsed data violates a domain invariant (dimensions, ranges, NaN, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A synthetic scene spec cannot be satisfied.
    #[error("scene spec error: {0}")]
    Spec(String),

    /// A spectrum has (near-)zero norm and no spectral angle is defined.
    #[error("degenerate spectrum: norm {0:e} below threshold")]
    DegenerateSpectrum(f64),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
