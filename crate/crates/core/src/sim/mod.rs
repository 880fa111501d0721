//! Deterministic federation simulator: overlapping data generation, genuine
//! and adversarial party updates, participation sampling, and the one-round
//! and multi-round training loops.
//!
//! Every random draw comes from a stream keyed by (master seed, purpose,
//! party, round), so runs are bit-reproducible across platforms and thread
//! counts, and the aggregator choice cannot perturb the data streams.

pub mod adversary;
pub mod data;
pub mod model;
pub mod round;

pub use adversary::adversary_update;
pub use data::{generate_overlapping_data, realized_overlap_spec};
pub use model::{GroundTruth, ModelParams};
pub use round::{genuine_update, run_multi_round_sgd, run_one_round_estimation, RunOutput};

use crate::error::AggError;
use crate::update::PartyId;
use serde::Serialize;
use thiserror::Error;

/// Errors raised while building or running a simulated federation.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("infeasible overlap design between parties {a} and {b}")]
    InfeasibleDesign { a: PartyId, b: PartyId },

    #[error("overlap design needs a pool of at least {needed} examples, got {pool}")]
    PoolTooSmall { needed: usize, pool: usize },

    #[error("party {0} has an empty batch")]
    EmptyBatch(PartyId),

    #[error("model parameters became non-finite at round {round}")]
    NonFiniteModel { round: usize },

    #[error("aggregation failed at round {round}: {source}")]
    Aggregation {
        round: usize,
        #[source]
        source: AggError,
    },

    #[error("invalid federation spec: {0}")]
    InvalidSpec(String),
}

/// Per-round metrics record emitted by the training loops.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: usize,
    /// Euclidean norm of each participant's submitted update.
    pub update_norms: Vec<(PartyId, f64)>,
    /// Aggregator weights when the method reports them.
    pub weights: Vec<(PartyId, f64)>,
    /// Test MSE (regression) or test accuracy (classification).
    pub metric: f64,
    /// Fixed at zero: report files must be byte-reproducible, so measured
    /// timings are reported out of band.
    pub wallclock_ms: u64,
    /// Parties whose local fit diverged this round (one-round mode).
    pub diverged: Vec<PartyId>,
}
