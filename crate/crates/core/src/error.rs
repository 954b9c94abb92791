use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Every entry of a logit vector is masked.
    #[error("empty support: every logit is masked")]
    EmptySupport,

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("token {token} out of range for vocabulary of size {size}")]
    TokenOutOfRange { token: u32, size: usize },

    #[error("backend: {0}")]
    Backend(#[from] BackendError),

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("caption {index}: {source}")]
    Caption {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{phase} phase: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("image {image_ref}: {source}")]
    Item {
        image_ref: String,
        #[source]
        source: Box<Error>,
    },

    #[error("testbed: {0}")]
    Testbed(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_phase(self, phase: &'static str) -> Self {
        Error::Phase {
            phase,
            source: Box::new(self),
        }
    }

    /// Strips step/phase/caption wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. }
            | Error::Caption { source, .. }
            | Error::Phase { source, .. }
            | Error::Item { source, .. } => source.root(),
            other => other,
        }
    }

    /// The backend failure underneath any context wrappers, if there is one.
    pub fn backend(&self) -> Option<&BackendError> {
        match self.root() {
            Error::Backend(e) => Some(e),
            _ => None,
        }
    }
}
