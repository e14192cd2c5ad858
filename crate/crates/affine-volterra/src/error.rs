//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Parameter or input validation failure (bad kernel exponent, dimension
    /// mismatch, non-psd matrix, malformed config, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A numerical procedure failed to reach its target (quadrature did not
    /// converge, Riccati solution blew up where a finite value was required,
    /// implied-vol search failed, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
