use std::fmt;

use thiserror::Error;

use crate::answer::AnswerError;
use crate::backends::BackendError;
use crate::config::ConfigError;
use crate::eval::EvalError;
use crate::rank::RankError;

/// A violated construction invariant on a domain type.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct InvariantError {
    pub field: &'static str,
    pub reason: String,
}

impl InvariantError {
    pub fn new(field: &'static str, reason: impl Into<String>) -> Self {
        Self {
            field,
            reason: reason.into(),
        }
    }
}

impl fmt::Display for InvariantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid {}: {}", self.field, self.reason)
    }
}

/// Top-level error for pipeline runs.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Answer(#[from] AnswerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error("empty question text")]
    EmptyQuestion,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("all {0} questions failed")]
    AllFailed(usize),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
