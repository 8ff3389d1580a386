use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was violated (shapes, lengths, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation produced NaN or infinity.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("non-deterministic function: two evaluations differ ({first} vs {second})")]
    Nondeterministic { first: f64, second: f64 },

    #[error("training diverged at stage {stage} step {step}: {detail}")]
    Diverged {
        stage: u8,
        step: usize,
        detail: String,
    },

    #[error("memory not trained: checkpoint is from stage 1")]
    MemoryNotTrained,

    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("missing representation for utterance `{0}`")]
    MissingRepresentation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True for failures of the numeric kind (divergence, NaN/Inf).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Nondeterministic { .. } | Error::Diverged { .. }
        )
    }
}
