use std::io;

use thiserror::Error;

/// Errors produced anywhere in the captioning stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error: {0}")]
    Shape(String),

    /// A configuration value violates an architectural constraint.
    #[error("config error: {0}")]
    Config(String),

    /// Cross-entropy was asked to average over zero target positions.
    #[error("undefined loss: every target position is ignored")]
    UndefinedLoss,

    #[error("backward error: {0}")]
    Backward(String),

    /// Loss or gradient became non-finite.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    /// Malformed dataset, manifest, or image file.
    #[error("data error: {0}")]
    Data(String),

    /// Analytic and instrumented cost disagree.
    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use shape_err;
