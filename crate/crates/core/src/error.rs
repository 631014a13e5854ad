use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by tensor ops, the graph, the pyramid and the networks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch { op: &'static str, left: Shape, right: Shape },

    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },

    #[error("backward needs a scalar loss, got shape {0}")]
    NotScalar(Shape),

    #[error("{levels} pyramid levels do not fit a {height}x{width} image; max admissible is {max}")]
    TooManyLevels { levels: usize, height: usize, width: usize, max: usize },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("internal graph error: {0}")]
    Internal(String),

    #[error("non-finite {which} loss at step {step}")]
    NonFiniteLoss { step: u64, which: &'static str },

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("{path}: malformed file at byte {offset}: {reason}")]
    Format { path: String, offset: u64, reason: String },

    #[error("{path}: format version `{found}` is not supported (expected `{expected}`)")]
    Version { path: String, found: String, expected: String },

    #[error("{path}: tensor `{tensor}` does not match the configuration: {reason}")]
    Layout { path: String, tensor: String, reason: String },

    #[error("{path}: checksum mismatch (manifest says {expected}, content hashes to {found})")]
    Checksum { path: String, expected: String, found: String },

    #[error("invalid configuration value for `{key}`: {reason}")]
    Config { key: String, reason: String },
}

impl Error {
    pub fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid { op, reason: reason.into() }
    }

    pub fn io(path: impl AsRef<std::path::Path>, e: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), message: e.to_string() }
    }

    pub fn format(path: impl AsRef<std::path::Path>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format { path: path.as_ref().display().to_string(), offset, reason: reason.into() }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { key: key.into(), reason: reason.into() }
    }
}
