use std::io;

use thiserror::Error;

/// Errors produced by the decoding engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("degenerate fit: all layer indices are identical")]
    DegenerateFit,

    #[error("end of trace after {0} steps")]
    EndOfTrace(usize),

    #[error("trace mismatch at step {step}: expected token {expected}, got {got}")]
    TraceMismatch {
        step: usize,
        expected: u32,
        got: u32,
    },

    #[error("malformed trace: {0}")]
    TraceFormat(String),

    #[error("trace write failed: {0}")]
    TraceWrite(#[source] io::Error),

    #[error("data error: {0}")]
    Data(String),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error, skipping step annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for errors caused by a bad configuration rather than bad data.
    pub fn is_config(&self) -> bool {
        matches!(self.root(), Error::InvalidConfig(_))
    }
}
