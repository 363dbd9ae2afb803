//! Error types shared across the library.

use thiserror::Error;

/// Library-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or values that violate an operation's contract.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Internal state broke an invariant (e.g. a non-positive variance).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A linear-algebra or floating-point failure that survived recovery
    /// attempts (jitter escalation, optimizer restarts).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed input file; carries a line number when one is known.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
