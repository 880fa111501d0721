//! Robust federated-learning aggregation with Bayesian party-quality
//! inference, plus a deterministic federation simulator and experiment
//! harness.
//!
//! The estimators treat each party's update as a noisy observation of an
//! unknown consensus vector and infer per-party noise jointly with the
//! consensus: inverse-variance weighting (scalar noise per party, MLE and
//! variational-Bayes variants) and inverse-covariance weighting (full or
//! low-rank cross-party covariance). Classical baselines (weighted mean,
//! coordinate-wise median, smoothed-Weiszfeld geometric median) share the
//! same dispatch interface.

pub mod aggregator;
pub mod baseline;
pub mod error;
pub mod harness;
pub mod icov;
pub mod ivar;
pub mod seedmix;
pub mod sim;
pub mod update;

pub use aggregator::{aggregate, AggregatorKind, NoiseState};
pub use error::{AggError, Result};
pub use update::{AggregateResult, PartyId, UpdateMatrix};
