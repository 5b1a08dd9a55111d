//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("normalization violated: {what} sums to {sum}")]
    Normalization { what: String, sum: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("unsupported document version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("no path with nonzero probability ends in a final state")]
    DecodeFailure,

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("unknown reference `{0}`")]
    UnknownReference(String),

    #[error("grammar: {0}")]
    Grammar(String),

    #[error("run `{run}`: {message}")]
    RunValidation { run: String, message: String },

    #[error("sequence {index}: {message}")]
    Sequence { index: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse class used for process exit codes.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::Config(_) | Error::InvalidArgument(_) => ErrorClass::Config,
            Error::DecodeFailure | Error::NumericFailure(_) => ErrorClass::Numeric,
            Error::Normalization { .. }
            | Error::Invariant(_)
            | Error::Version { .. }
            | Error::Malformed(_)
            | Error::UnknownReference(_)
            | Error::Grammar(_)
            | Error::RunValidation { .. }
            | Error::Sequence { .. } => ErrorClass::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Validation,
    Numeric,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Io => 3,
            ErrorClass::Validation => 4,
            ErrorClass::Numeric => 5,
        }
    }
}
