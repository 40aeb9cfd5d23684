use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank { expected: usize, shape: Vec<usize> },

    #[error("expected a one-element tensor, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid geometry: {0}")]
    Geometry(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("batch norm in train mode needs at least 2 elements per channel, got {0}")]
    DegenerateVariance(usize),

    #[error("tensor is not recorded on this tape")]
    OffTape,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown loss variant `{0}`")]
    UnknownVariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownVariant(_) => 1,
            Error::Io { .. } | Error::Format { .. } | Error::Data(_) => 2,
            _ => 3,
        }
    }
}
