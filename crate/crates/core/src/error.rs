use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands (or an operand and its declared shape) disagree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A layer or network configuration cannot produce integral extents,
    /// or violates a parameter invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// A model was asked to handle data it was not built for, e.g. a class
    /// count smaller than the largest label.
    #[error("model/data mismatch: {0}")]
    Mismatch(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("image format error in {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("file name does not follow the id{{I}}_p{{P}}_l{{L}}.(pgm|ppm) convention: {0:?}")]
    Naming(Vec<PathBuf>),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown {kind} {name:?}")]
    Unknown { kind: &'static str, name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
