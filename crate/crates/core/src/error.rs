//! Error types shared across the simulator.

use thiserror::Error;

/// Errors produced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    /// Input or parameter vector does not match the expected shape.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A precondition on argument values was violated.
    #[error("domain error: {0}")]
    Domain(String),

    /// A binary input file is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Two inputs that must agree do not.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Dataset partitioning could not be completed.
    #[error("partition error: {0}")]
    Partition(String),

    /// Federation protocol state is inconsistent.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Experiment configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
