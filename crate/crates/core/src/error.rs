//! Error types shared by the aggregation routines.

use crate::update::PartyId;
use thiserror::Error;

/// Errors raised by aggregators and the estimators backing them.
#[derive(Debug, Error)]
pub enum AggError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },

    #[error("numerical failure at iteration {iteration}")]
    Numerical { iteration: usize },

    #[error("matrix not positive definite after jitter")]
    NotPositiveDefinite,

    #[error("unknown party {0}")]
    UnknownParty(PartyId),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("degenerate covariance estimate: no party pair co-occurs in any round")]
    DegenerateEstimate,

    #[error("invalid overlap spec: {0}")]
    InvalidSpec(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),

    #[error("objective diverged at epoch {epoch}; reduce the learning rate")]
    StepSize { epoch: usize },
}

pub type Result<T> = std::result::Result<T, AggError>;
