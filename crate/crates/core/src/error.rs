use std::io;

use thiserror::Error;

/// Errors raised across the tensor engine, kernels, model and harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(#[from] FormatError),

    #[error("load error: tensor `{name}`: {reason}")]
    Load { name: String, reason: String },

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Failures decoding an MBRT tensor container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected \"MBRT\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),

    #[error("truncated container while reading {0}")]
    Truncated(&'static str),

    #[error("tensor name is not valid UTF-8")]
    InvalidName,

    #[error("tensor name `{0}` is longer than 65535 bytes")]
    NameTooLong(String),

    #[error("tensor `{0}` has rank above 255")]
    RankTooLarge(String),

    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
