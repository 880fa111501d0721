//! Inverse-variance weighting: the joint MLE fixed point over consensus and
//! per-party variances, and the independent-noise variational-Bayes variant.
//!
//! Both estimators keep per-party state across aggregation calls: frozen
//! per-round residual statistics over a sliding window, so that a party's
//! variance is re-estimated from its recent behaviour every call.

use crate::error::{AggError, Result};
use crate::update::{AggregateResult, PartyId, UpdateMatrix};
use nalgebra::DVector;
use std::collections::{BTreeMap, VecDeque};

pub const DEFAULT_WINDOW: usize = 10;

/// Hyperparameters of the MLE fixed point.
#[derive(Debug, Clone, PartialEq)]
pub struct IvarMleParams {
    /// Iteration cap T.
    pub iters: usize,
    /// Stop when no consensus moves more than this between iterations.
    pub tol: f64,
    /// Variance floor epsilon.
    pub floor: f64,
    /// Start from the coordinate-wise median instead of the variance-driven
    /// first pass.
    pub robust_start: bool,
}

impl Default for IvarMleParams {
    fn default() -> Self {
        Self {
            iters: 100,
            tol: 1e-8,
            floor: 1e-8,
            robust_start: false,
        }
    }
}

impl IvarMleParams {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(AggError::InvalidHyper("iters must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(AggError::InvalidHyper("tol must be >= 0".into()));
        }
        if !(self.floor > 0.0) {
            return Err(AggError::InvalidHyper("floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-party variance estimate from the latest aggregation call.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyVariance {
    sigma_sq: f64,
}

impl PartyVariance {
    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }
}

/// Cross-round state of the MLE aggregator: the raw sliding window of
/// recent rounds, plus the variance estimates from the latest call.
///
/// Every call re-runs the joint fixed point over the whole window from
/// sigma^2 = 1, so a heavily weighted party's small residuals cannot feed
/// back into later calls and collapse all weight onto it.
#[derive(Debug, Clone, PartialEq)]
pub struct IvarState {
    window: usize,
    rounds: VecDeque<UpdateMatrix>,
    parties: BTreeMap<PartyId, PartyVariance>,
}

impl IvarState {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            rounds: VecDeque::new(),
            parties: BTreeMap::new(),
        }
    }

    pub fn sigma_sq(&self, party: PartyId) -> Option<f64> {
        self.parties.get(&party).map(|p| p.sigma_sq)
    }

    pub fn party_count(&self) -> usize {
        self.parties.len()
    }

    /// Rounds currently held in the sliding window.
    pub fn window_len(&self) -> usize {
        self.rounds.len()
    }

    /// Pin a party's variance (fresh parties otherwise start at 1).
    pub fn set_sigma_sq(&mut self, party: PartyId, sigma_sq: f64) {
        self.parties
            .entry(party)
            .or_insert(PartyVariance { sigma_sq })
            .sigma_sq = sigma_sq;
    }

    fn register(&mut self, rounds: &[UpdateMatrix]) {
        for round in rounds {
            for &p in round.party_ids() {
                self.parties
                    .entry(p)
                    .or_insert(PartyVariance { sigma_sq: 1.0 });
            }
        }
    }
}

/// Normalized inverse-variance weights for the given participant set.
pub fn ivar_weights(state: &IvarState, parties: &[PartyId]) -> Result<Vec<f64>> {
    let mut inv = Vec::with_capacity(parties.len());
    for &p in parties {
        let sigma_sq = state.sigma_sq(p).ok_or(AggError::UnknownParty(p))?;
        inv.push(1.0 / sigma_sq);
    }
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|w| w / total).collect())
}

fn inverse_variance_consensus(
    round: &UpdateMatrix,
    sigma: impl Fn(PartyId) -> f64,
) -> DVector<f64> {
    let mut numer = DVector::zeros(round.dim());
    let mut denom = 0.0;
    for (j, &p) in round.party_ids().iter().enumerate() {
        let w = 1.0 / sigma(p);
        numer.axpy(w, &round.column(j), 1.0);
        denom += w;
    }
    numer / denom
}

/// Scaled Gaussian log-likelihood of the task set, dropping constants:
/// sum over (i, j) of -k_i ln sigma_j^2 - res_ij / sigma_j^2.
fn joint_loglik(
    sigmas: &BTreeMap<PartyId, f64>,
    rounds: &[&UpdateMatrix],
    consensuses: &[DVector<f64>],
) -> f64 {
    let mut ll = 0.0;
    for (round, y) in rounds.iter().zip(consensuses) {
        let k = round.dim() as f64;
        for (j, &p) in round.party_ids().iter().enumerate() {
            let sigma_sq = sigmas[&p];
            let res = (round.column(j) - y).norm_squared();
            ll += -k * sigma_sq.ln() - res / sigma_sq;
        }
    }
    ll
}

/// Joint MLE over per-round consensus vectors and per-party variances.
///
/// The task set is the sliding window of past rounds plus the rounds passed
/// in. Each call alternates the inverse-variance mean and the pooled,
/// floored residual variance update from sigma^2 = 1 (so the first pass is
/// the uniform mean), for `iters` passes or until no consensus moves more
/// than `tol`.
pub fn ivar_mle_aggregate(
    rounds: &[UpdateMatrix],
    state: &mut IvarState,
    params: &IvarMleParams,
) -> Result<Vec<AggregateResult>> {
    params.validate()?;
    if rounds.is_empty() {
        return Err(AggError::EmptyInput("no rounds to aggregate"));
    }
    state.register(rounds);

    let batch: Vec<&UpdateMatrix> = state.rounds.iter().chain(rounds.iter()).collect();
    let mut sigmas: BTreeMap<PartyId, f64> = batch
        .iter()
        .flat_map(|r| r.party_ids().iter().copied())
        .map(|p| (p, 1.0))
        .collect();

    let mut consensuses: Vec<DVector<f64>> = batch
        .iter()
        .map(|r| crate::baseline::coordinate_median(r).consensus)
        .collect();
    if params.robust_start {
        update_sigmas(&mut sigmas, &batch, &consensuses, params.floor);
    }

    let mut trace = Vec::with_capacity(params.iters);
    let mut iterations = 0;
    for t in 1..=params.iters {
        let mut max_step = 0.0f64;
        for (i, round) in batch.iter().enumerate() {
            let y = inverse_variance_consensus(round, |p| sigmas[&p]);
            let step = if t == 1 && !params.robust_start {
                f64::INFINITY
            } else {
                (&y - &consensuses[i]).norm()
            };
            max_step = max_step.max(step);
            consensuses[i] = y;
        }
        update_sigmas(&mut sigmas, &batch, &consensuses, params.floor);
        trace.push(joint_loglik(&sigmas, &batch, &consensuses));
        iterations = t;
        if max_step <= params.tol {
            break;
        }
    }

    for (p, sigma_sq) in &sigmas {
        state.parties.get_mut(p).expect("registered").sigma_sq = *sigma_sq;
    }

    let offset = batch.len() - rounds.len();
    let results = rounds
        .iter()
        .enumerate()
        .map(|(i, round)| {
            let weights = ivar_weights(state, round.party_ids())?;
            Ok(AggregateResult {
                consensus: consensuses[offset + i].clone(),
                weights: Some(weights),
                iterations,
                objective_trace: Some(trace.clone()),
                posterior_var: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    for round in rounds {
        state.rounds.push_back(round.clone());
        while state.rounds.len() > state.window {
            state.rounds.pop_front();
        }
    }
    Ok(results)
}

fn update_sigmas(
    sigmas: &mut BTreeMap<PartyId, f64>,
    rounds: &[&UpdateMatrix],
    consensuses: &[DVector<f64>],
    floor: f64,
) {
    let mut pooled: BTreeMap<PartyId, (f64, f64)> = BTreeMap::new();
    for (round, y) in rounds.iter().zip(consensuses) {
        for (j, &p) in round.party_ids().iter().enumerate() {
            let res = (round.column(j) - y).norm_squared();
            let e = pooled.entry(p).or_insert((0.0, 0.0));
            e.0 += res;
            e.1 += round.dim() as f64;
        }
    }
    for (p, (res, k)) in pooled {
        sigmas.insert(p, floor.max(res / k));
    }
}

// ---------------------------------------------------------------------------
// Variational Bayes under the independent-noise model.
// ---------------------------------------------------------------------------

/// Hyperparameters of the independent-noise VB aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct IvarVbParams {
    pub iters: usize,
    /// Stop when the relative change of every hyperparameter falls below
    /// this between passes.
    pub tol: f64,
    /// Skip the hyperparameter M-step (used when the caller pins tau^2 and
    /// the sigma_j^2).
    pub freeze_hyperparams: bool,
}

impl Default for IvarVbParams {
    fn default() -> Self {
        Self {
            iters: 100,
            tol: 1e-8,
            freeze_hyperparams: false,
        }
    }
}

impl IvarVbParams {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(AggError::InvalidHyper("iters must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(AggError::InvalidHyper("tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Cross-round state of the independent-noise VB aggregator: the raw round
/// window plus the posterior and hyperparameter estimates of the latest
/// call.
///
/// Like the MLE state, every call re-runs the block coordinate ascent over
/// the whole window from the initial hyperparameters, so weight
/// concentration cannot ratchet across calls through frozen residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct IvarVbState {
    window: usize,
    rounds: VecDeque<UpdateMatrix>,
    /// Prior variance the ascent starts from each call.
    pub tau_sq_init: f64,
    /// Cold-start noise variances for specific parties (default 1).
    sigma_init: BTreeMap<PartyId, f64>,
    /// Prior variance tau^2 estimated by the latest call.
    pub tau_sq: f64,
    /// Per-party noise variances estimated by the latest call.
    sigmas: BTreeMap<PartyId, f64>,
}

impl IvarVbState {
    pub fn new(window: usize) -> Self {
        Self::with_prior(window, 1.0)
    }

    pub fn with_prior(window: usize, tau_sq: f64) -> Self {
        Self {
            window: window.max(1),
            rounds: VecDeque::new(),
            tau_sq_init: tau_sq,
            sigma_init: BTreeMap::new(),
            tau_sq,
            sigmas: BTreeMap::new(),
        }
    }

    pub fn sigma_sq(&self, party: PartyId) -> Option<f64> {
        self.sigmas.get(&party).copied()
    }

    /// Pin a party's cold-start variance (fresh parties otherwise start
    /// at 1).
    pub fn set_sigma_sq(&mut self, party: PartyId, sigma_sq: f64) {
        self.sigma_init.insert(party, sigma_sq);
        self.sigmas.insert(party, sigma_sq);
    }

    /// Normalized inverse-variance weights over the given participants,
    /// from the latest call's estimates.
    pub fn weights(&self, parties: &[PartyId]) -> Result<Vec<f64>> {
        let mut inv = Vec::with_capacity(parties.len());
        for &p in parties {
            let s = self.sigma_sq(p).ok_or(AggError::UnknownParty(p))?;
            inv.push(1.0 / s);
        }
        let total: f64 = inv.iter().sum();
        Ok(inv.into_iter().map(|w| w / total).collect())
    }
}

fn vb_posterior(
    round: &UpdateMatrix,
    tau_sq: f64,
    sigmas: &BTreeMap<PartyId, f64>,
) -> (f64, DVector<f64>) {
    let mut precision = 1.0 / tau_sq;
    let mut numer = DVector::zeros(round.dim());
    for (j, p) in round.party_ids().iter().enumerate() {
        let s = sigmas[p];
        precision += 1.0 / s;
        numer.axpy(1.0 / s, &round.column(j), 1.0);
    }
    let lambda = 1.0 / precision;
    (lambda, numer * lambda)
}

const LN_2PI: f64 = 1.8378770664093453;

// Hard floor on the VB variance M-steps: degenerate inputs (identical
// columns) otherwise drive variances to zero geometrically.
const VAR_FLOOR: f64 = 1e-30;

/// Variational free energy of the windowed model under the current
/// posteriors and hyperparameters.
fn vb_free_energy(
    rounds: &[&UpdateMatrix],
    tau_sq: f64,
    sigmas: &BTreeMap<PartyId, f64>,
    lambdas: &[f64],
    means: &[DVector<f64>],
) -> f64 {
    let mut f = 0.0;
    for ((round, y), &lambda) in rounds.iter().zip(means).zip(lambdas) {
        let k = round.dim() as f64;
        for (j, p) in round.party_ids().iter().enumerate() {
            let sigma_sq = sigmas[p];
            let res = (round.column(j) - y).norm_squared();
            f += -0.5 * k * (LN_2PI + sigma_sq.ln()) - (k * lambda + res) / (2.0 * sigma_sq);
        }
        // Prior and entropy of the consensus posterior.
        f += -0.5 * k * (LN_2PI + tau_sq.ln()) - (k * lambda + y.norm_squared()) / (2.0 * tau_sq);
        f += 0.5 * k * (1.0 + LN_2PI + lambda.ln());
    }
    f
}

/// Block coordinate ascent on the independent-noise variational free
/// energy over the window plus the rounds passed in.
///
/// Each pass recomputes the consensus posteriors (lambda_i, y_bar_i) in
/// closed form and then the hyperparameters tau^2 and sigma_j^2; consensus
/// is the posterior mean.
pub fn ivar_vb_aggregate(
    rounds: &[UpdateMatrix],
    state: &mut IvarVbState,
    params: &IvarVbParams,
) -> Result<Vec<AggregateResult>> {
    params.validate()?;
    if rounds.is_empty() {
        return Err(AggError::EmptyInput("no rounds to aggregate"));
    }
    if !(state.tau_sq_init > 0.0) {
        return Err(AggError::InvalidHyper("tau_sq must be > 0".into()));
    }

    let batch: Vec<&UpdateMatrix> = state.rounds.iter().chain(rounds.iter()).collect();
    let mut tau_sq = state.tau_sq_init;
    let mut sigmas: BTreeMap<PartyId, f64> = batch
        .iter()
        .flat_map(|r| r.party_ids().iter().copied())
        .map(|p| (p, state.sigma_init.get(&p).copied().unwrap_or(1.0)))
        .collect();

    let mut lambdas = vec![0.0; batch.len()];
    let mut means: Vec<DVector<f64>> = batch.iter().map(|r| DVector::zeros(r.dim())).collect();
    let mut trace = Vec::with_capacity(params.iters);
    let mut iterations = 0;

    for t in 1..=params.iters {
        for (i, round) in batch.iter().enumerate() {
            let (lambda, mean) = vb_posterior(round, tau_sq, &sigmas);
            lambdas[i] = lambda;
            means[i] = mean;
        }

        let mut max_change = 0.0f64;
        if !params.freeze_hyperparams {
            // tau^2 <- pooled (K lambda_i + ||y_bar_i||^2) / K.
            let mut num = 0.0;
            let mut den = 0.0;
            for ((round, y), &lambda) in batch.iter().zip(&means).zip(&lambdas) {
                num += round.dim() as f64 * lambda + y.norm_squared();
                den += round.dim() as f64;
            }
            let tau_new = (num / den).max(VAR_FLOOR);
            max_change = max_change.max((tau_new - tau_sq).abs() / (1.0 + tau_sq));
            tau_sq = tau_new;

            // sigma_j^2 <- pooled (K lambda_i + ||x_ij - y_bar_i||^2) / K.
            let mut pooled: BTreeMap<PartyId, (f64, f64)> = BTreeMap::new();
            for ((round, y), &lambda) in batch.iter().zip(&means).zip(&lambdas) {
                let k = round.dim() as f64;
                for (j, &p) in round.party_ids().iter().enumerate() {
                    let res = (round.column(j) - y).norm_squared();
                    let e = pooled.entry(p).or_insert((0.0, 0.0));
                    e.0 += k * lambda + res;
                    e.1 += k;
                }
            }
            for (p, (num, den)) in pooled {
                let fresh = (num / den).max(VAR_FLOOR);
                let old = sigmas[&p];
                max_change = max_change.max((fresh - old).abs() / (1.0 + old));
                sigmas.insert(p, fresh);
            }
        }

        trace.push(vb_free_energy(&batch, tau_sq, &sigmas, &lambdas, &means));
        iterations = t;
        if max_change < params.tol {
            break;
        }
    }

    if !params.freeze_hyperparams {
        // Refresh the posteriors so the returned lambda_i and y_bar_i are
        // consistent with the final hyperparameters.
        for (i, round) in batch.iter().enumerate() {
            let (lambda, mean) = vb_posterior(round, tau_sq, &sigmas);
            lambdas[i] = lambda;
            means[i] = mean;
        }
    }

    state.tau_sq = tau_sq;
    state.sigmas = sigmas;

    let offset = batch.len() - rounds.len();
    let results = rounds
        .iter()
        .enumerate()
        .map(|(i, round)| {
            let weights = state.weights(round.party_ids())?;
            Ok(AggregateResult {
                consensus: means[offset + i].clone(),
                weights: Some(weights),
                iterations,
                objective_trace: Some(trace.clone()),
                posterior_var: Some(lambdas[offset + i]),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    for round in rounds {
        state.rounds.push_back(round.clone());
        while state.rounds.len() > state.window {
            state.rounds.pop_front();
        }
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn ids(v: &[u32]) -> Vec<PartyId> {
        v.iter().map(|&i| PartyId(i)).collect()
    }

    fn matrix(round: u64, k: usize, cols: &[&[f64]]) -> UpdateMatrix {
        let ids = (0..cols.len() as u32).map(PartyId).collect();
        let values = DMatrix::from_fn(k, cols.len(), |r, c| cols[c][r]);
        UpdateMatrix::new(round, ids, values).unwrap()
    }

    #[test]
    fn symmetric_pair_converges_to_midpoint() {
        let x = matrix(0, 1, &[&[0.0], &[2.0]]);
        let mut state = IvarState::new(10);
        let r = ivar_mle_aggregate(&[x], &mut state, &IvarMleParams::default()).unwrap();
        assert_relative_eq!(r[0].consensus[0], 1.0, epsilon = 1e-12);
        let w = r[0].weights.clone().unwrap();
        assert_relative_eq!(w[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn equal_variances_give_arithmetic_mean() {
        // With no history and symmetric residuals the fixed point keeps all
        // variances equal, so the consensus is the plain mean.
        let x = matrix(0, 1, &[&[-3.0], &[3.0]]);
        let mut state = IvarState::new(10);
        let r = ivar_mle_aggregate(&[x], &mut state, &IvarMleParams::default()).unwrap();
        assert_relative_eq!(r[0].consensus[0], 0.0, epsilon = 1e-12);
    }

    /// Independent oracle: scripted iteration of the inverse-variance
    /// mean and the floored residual variance update, on plain arrays.
    fn mle_oracle(cols: &[[f64; 2]], iters: usize, floor: f64) -> [f64; 2] {
        let k = 2.0;
        let mut sigma = vec![1.0; cols.len()];
        let mut y = [0.0, 0.0];
        for _ in 0..iters {
            let mut num = [0.0, 0.0];
            let mut den = 0.0;
            for (c, s) in cols.iter().zip(&sigma) {
                num[0] += c[0] / s;
                num[1] += c[1] / s;
                den += 1.0 / s;
            }
            y = [num[0] / den, num[1] / den];
            for (c, s) in cols.iter().zip(sigma.iter_mut()) {
                let res = (c[0] - y[0]).powi(2) + (c[1] - y[1]).powi(2);
                *s = (res / k).max(floor);
            }
        }
        y
    }

    #[test]
    fn outlier_column_is_suppressed() {
        let cols = [[0.0, 0.0], [0.0, 0.0], [6.0, 8.0]];
        let oracle = mle_oracle(&cols, 50, 1e-8);
        assert!(oracle[0].abs() < 0.05 && oracle[1].abs() < 0.05);

        let x = matrix(0, 2, &[&cols[0], &cols[1], &cols[2]]);
        let mut state = IvarState::new(10);
        let params = IvarMleParams {
            iters: 50,
            tol: 0.0,
            ..IvarMleParams::default()
        };
        let r = ivar_mle_aggregate(&[x], &mut state, &params).unwrap();
        assert_relative_eq!(r[0].consensus[0], oracle[0], epsilon = 1e-9);
        assert_relative_eq!(r[0].consensus[1], oracle[1], epsilon = 1e-9);
        assert!(r[0].consensus.norm() < 0.05);
    }

    #[test]
    fn loglik_trace_non_decreasing() {
        let x = matrix(
            0,
            2,
            &[&[0.1, -0.4], &[0.7, 0.2], &[-0.5, 0.9], [4.0, -3.0].as_ref()],
        );
        let mut state = IvarState::new(10);
        let params = IvarMleParams {
            iters: 60,
            tol: 0.0,
            ..IvarMleParams::default()
        };
        let r = ivar_mle_aggregate(&[x], &mut state, &params).unwrap();
        let trace = r[0].objective_trace.clone().unwrap();
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "log-likelihood decreased: {w:?}");
        }
    }

    #[test]
    fn weights_from_state() {
        let mut state = IvarState::new(10);
        state.set_sigma_sq(PartyId(0), 1.0);
        state.set_sigma_sq(PartyId(1), 3.0);
        let w = ivar_weights(&state, &ids(&[0, 1])).unwrap();
        assert_relative_eq!(w[0], 0.75, epsilon = 1e-12);
        assert_relative_eq!(w[1], 0.25, epsilon = 1e-12);

        state.set_sigma_sq(PartyId(0), 1e-8);
        state.set_sigma_sq(PartyId(1), 1e4);
        let w = ivar_weights(&state, &ids(&[0, 1])).unwrap();
        assert!(w[0] >= 1.0 - 1e-6);

        assert!(matches!(
            ivar_weights(&state, &ids(&[7])),
            Err(AggError::UnknownParty(_))
        ));
    }

    #[test]
    fn empty_round_set_is_rejected() {
        let mut state = IvarState::new(10);
        assert!(matches!(
            ivar_mle_aggregate(&[], &mut state, &IvarMleParams::default()),
            Err(AggError::EmptyInput(_))
        ));
        let mut vb = IvarVbState::new(10);
        assert!(ivar_vb_aggregate(&[], &mut vb, &IvarVbParams::default()).is_err());
    }

    #[test]
    fn vb_posterior_closed_form() {
        // tau^2 = 1, two parties with sigma^2 = 1 frozen, K = 1:
        // lambda = 1/3 and y_bar = (a + b) / 3.
        let (a, b) = (1.2, -0.6);
        let x = matrix(0, 1, &[&[a], &[b]]);
        let mut state = IvarVbState::new(10);
        let params = IvarVbParams {
            iters: 1,
            freeze_hyperparams: true,
            ..IvarVbParams::default()
        };
        let r = ivar_vb_aggregate(&[x], &mut state, &params).unwrap();
        assert_relative_eq!(r[0].posterior_var.unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(r[0].consensus[0], (a + b) / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn vb_flat_prior_matches_inverse_variance_mean() {
        // tau^2 -> infinity washes the prior out of the posterior mean.
        let x = matrix(0, 1, &[&[2.0], &[5.0], &[-1.0]]);
        let mut state = IvarVbState::with_prior(10, 1e12);
        state.set_sigma_sq(PartyId(0), 0.5);
        state.set_sigma_sq(PartyId(1), 2.0);
        state.set_sigma_sq(PartyId(2), 1.0);
        let params = IvarVbParams {
            iters: 1,
            freeze_hyperparams: true,
            ..IvarVbParams::default()
        };
        let r = ivar_vb_aggregate(&[x.clone()], &mut state, &params).unwrap();

        let expected = inverse_variance_consensus(&x, |p| match p.0 {
            0 => 0.5,
            1 => 2.0,
            _ => 1.0,
        });
        assert_relative_eq!(r[0].consensus[0], expected[0], max_relative = 1e-6);
    }

    #[test]
    fn vb_recovers_planted_variance_ordering() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let truth_dist = Normal::new(0.0, 1.0).unwrap();
        let planted = [0.1, 0.1, 10.0];
        let rounds: Vec<UpdateMatrix> = (0..5)
            .map(|i| {
                let y: f64 = truth_dist.sample(&mut rng);
                let cols: Vec<DVector<f64>> = planted
                    .iter()
                    .map(|&s: &f64| {
                        let noise = Normal::new(0.0, s.sqrt()).unwrap().sample(&mut rng);
                        DVector::from_vec(vec![y + noise])
                    })
                    .collect();
                UpdateMatrix::from_columns(i, ids(&[0, 1, 2]), &cols).unwrap()
            })
            .collect();
        let mut state = IvarVbState::new(10);
        ivar_vb_aggregate(&rounds, &mut state, &IvarVbParams::default()).unwrap();
        let s0 = state.sigma_sq(PartyId(0)).unwrap();
        let s1 = state.sigma_sq(PartyId(1)).unwrap();
        let s2 = state.sigma_sq(PartyId(2)).unwrap();
        // The noisy party must be identified as such.
        assert!(s2 > s0 && s2 > s1, "recovered ({s0}, {s1}, {s2})");
    }

    #[test]
    fn vb_free_energy_non_decreasing_and_lambda_bounds() {
        use rand::Rng as _;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let cols: Vec<DVector<f64>> = (0..4)
                .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0)))
                .collect();
            let x = UpdateMatrix::from_columns(0, ids(&[0, 1, 2, 3]), &cols).unwrap();
            let mut state = IvarVbState::new(10);
            let params = IvarVbParams {
                iters: 50,
                tol: 0.0,
                ..IvarVbParams::default()
            };
            let r = ivar_vb_aggregate(&[x.clone()], &mut state, &params).unwrap();
            let trace = r[0].objective_trace.clone().unwrap();
            for w in trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "free energy decreased: {w:?}");
            }
            // lambda identity against the final hyperparameters.
            let lambda = r[0].posterior_var.unwrap();
            let mut precision = 1.0 / state.tau_sq;
            let mut min_sigma = f64::INFINITY;
            for &p in x.party_ids() {
                let s = state.sigma_sq(p).unwrap();
                precision += 1.0 / s;
                min_sigma = min_sigma.min(s);
            }
            assert_relative_eq!(lambda, 1.0 / precision, max_relative = 1e-12);
            assert!(lambda > 0.0 && lambda <= state.tau_sq + 1e-15);
            assert!(lambda <= min_sigma + 1e-15);
        }
    }

    #[test]
    fn round_window_is_trimmed() {
        let mut state = IvarState::new(3);
        let params = IvarMleParams::default();
        for i in 0..6 {
            let x = matrix(i, 1, &[&[i as f64], &[1.0 + i as f64]]);
            ivar_mle_aggregate(&[x], &mut state, &params).unwrap();
        }
        assert_eq!(state.window_len(), 3);
    }
}
