use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence contains no unmasked observation")]
    AllPadded,

    #[error("label map contains no counted pixel (all IGNORE)")]
    AllIgnored,

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: i64, n_classes: usize },

    #[error("backward requires a prior train-mode forward pass")]
    BackwardBeforeForward,

    #[error("split `{0}` contains no samples")]
    EmptySplit(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unexpected end of file while reading {0}")]
    Truncated(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    /// Coarse classification used by the command line for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArgument { .. } | Error::ShapeMismatch { .. } => {
                ErrorKind::Config
            }
            Error::NonFinite { .. } => ErrorKind::Numerical,
            Error::BackwardBeforeForward => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}
