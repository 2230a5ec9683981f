use std::io;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes or spatial sizes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An argument violates an operation's precondition.
    #[error("validation error: {0}")]
    Validation(String),
    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),
    /// Invalid experiment or network configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// An op produced NaN or infinity while finite-checking was enabled.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! invalid {
    ($($arg:tt)*) => { $crate::error::Error::Validation(format!($($arg)*)) };
}
pub(crate) use dim_err;
pub(crate) use invalid;
