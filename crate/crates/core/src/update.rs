//! Observation types: the per-round stack of party updates and the
//! consensus produced from it.

use crate::error::{AggError, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

/// Identifier of a federation participant.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct PartyId(pub u32);

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for PartyId {
    fn from(id: u32) -> Self {
        PartyId(id)
    }
}

/// One round of updates: a dense K x |J| matrix whose column j holds the
/// update vector submitted by `party_ids[j]`.
///
/// Construction validates that all entries are finite, party ids are
/// distinct, and dimensions are consistent; aggregators can rely on those
/// invariants without re-checking.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateMatrix {
    round_id: u64,
    party_ids: Vec<PartyId>,
    values: DMatrix<f64>,
}

impl UpdateMatrix {
    pub fn new(round_id: u64, party_ids: Vec<PartyId>, values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(AggError::EmptyInput("update dimension K must be >= 1"));
        }
        if party_ids.is_empty() {
            return Err(AggError::EmptyInput("at least one party per round"));
        }
        if values.ncols() != party_ids.len() {
            return Err(AggError::ShapeMismatch {
                expected: party_ids.len(),
                actual: values.ncols(),
            });
        }
        let distinct: BTreeSet<_> = party_ids.iter().collect();
        if distinct.len() != party_ids.len() {
            return Err(AggError::InvalidSpec("duplicate party id in round".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AggError::NonFinite {
                what: "update matrix",
            });
        }
        Ok(Self {
            round_id,
            party_ids,
            values,
        })
    }

    /// Build from per-party column vectors.
    pub fn from_columns(
        round_id: u64,
        party_ids: Vec<PartyId>,
        columns: &[DVector<f64>],
    ) -> Result<Self> {
        if columns.is_empty() {
            return Err(AggError::EmptyInput("at least one party per round"));
        }
        let k = columns[0].len();
        if columns.iter().any(|c| c.len() != k) {
            return Err(AggError::ShapeMismatch {
                expected: k,
                actual: columns.iter().map(|c| c.len()).find(|&l| l != k).unwrap(),
            });
        }
        let values = DMatrix::from_fn(k, columns.len(), |r, c| columns[c][r]);
        Self::new(round_id, party_ids, values)
    }

    pub fn round_id(&self) -> u64 {
        self.round_id
    }

    /// Update dimension K.
    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Number of participating parties |J|.
    pub fn party_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn party_ids(&self) -> &[PartyId] {
        &self.party_ids
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Column submitted by the party at position `idx`.
    pub fn column(&self, idx: usize) -> DVector<f64> {
        DVector::from_column_slice(self.values.column(idx).as_slice())
    }

    /// Position of a party within this round, if it participated.
    pub fn position_of(&self, party: PartyId) -> Option<usize> {
        self.party_ids.iter().position(|&p| p == party)
    }
}

/// Output of an aggregation: the consensus vector plus diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateResult {
    /// Consensus vector of length K.
    pub consensus: DVector<f64>,
    /// Per-party weights in `party_ids` order, summing to 1 when the method
    /// is a weighted mean. Inverse-covariance weights may be negative.
    pub weights: Option<Vec<f64>>,
    /// Iterations executed (1 for closed-form methods).
    pub iterations: usize,
    /// Per-iteration scalar objective (smoothed Weiszfeld objective,
    /// log-likelihood, or variational free energy depending on the method).
    pub objective_trace: Option<Vec<f64>>,
    /// Posterior variance of the consensus for Bayesian methods.
    pub posterior_var: Option<f64>,
}

impl AggregateResult {
    pub fn closed_form(consensus: DVector<f64>, weights: Option<Vec<f64>>) -> Self {
        Self {
            consensus,
            weights,
            iterations: 1,
            objective_trace: None,
            posterior_var: None,
        }
    }
}
