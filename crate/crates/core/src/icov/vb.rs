//! Variational Bayes under the latent noise model: every update is modeled
//! as x_ij = y_i + u_i . v_j + noise, with Gaussian posteriors over the
//! consensus, task features and party features, updated by block coordinate
//! ascent on the variational free energy.
//!
//! The observation noise is per-party by default (the diag(sigma^2_j) of
//! the aggregator's covariance line), anchoring the consensus on the
//! low-noise parties exactly as inverse-variance weighting does, while the
//! latent channel models cross-party correlation on top. The literal
//! shared-sigma^2 likelihood is available as an option; with genuinely
//! adversarial parties it cannot anchor the consensus (all parties weigh
//! equally in the posterior mean), so it is not the default.
//!
//! The cross-round state is the raw sliding window of recent rounds; every
//! call re-runs the ascent over the whole window from the initial
//! hyperparameters, which keeps weight concentration from ratcheting
//! across calls through stale posteriors.

use super::{spd_cholesky, CovarianceModel};
use crate::error::{AggError, Result};
use crate::seedmix;
use crate::update::{AggregateResult, PartyId, UpdateMatrix};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use std::collections::{BTreeMap, VecDeque};

const LN_2PI: f64 = 1.8378770664093453;

// Hard floor on variance M-steps: degenerate inputs (e.g. identical
// columns) otherwise drive the noise variance to zero geometrically and
// the next pass divides by it.
const VAR_FLOOR: f64 = 1e-30;

/// Hyperparameters of the latent-noise VB aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct IcovVbParams {
    /// Latent dimension D.
    pub latent_dim: usize,
    /// Full update passes per call.
    pub iters: usize,
    /// Stop when the free energy changes less than this (relative).
    pub tol: f64,
    /// Initialize party features and noise variances from an
    /// inverse-variance prepass: features from the top-D eigenvectors of
    /// the residual covariance, variances from the prepass residuals.
    /// Strong feature initialization lets the factors detect block
    /// structure that random initialization misses, but on rounds that
    /// carry a strong consensus it also arms a noise-overfitting loop
    /// through the high-precision parties, so it is off by default and
    /// used for covariance analysis of centered update sets.
    pub spectral_init: bool,
    /// Standard deviation of the random party-feature initialization used
    /// when `spectral_init` is off or the covariance is degenerate.
    pub init_scale: f64,
    /// Estimate one noise variance per party (Algorithm 2's diagonal)
    /// instead of a single shared sigma^2.
    pub per_party_noise: bool,
    /// Apply the M-step to the consensus prior sigma_y^2 (on by default,
    /// matching the independent-noise aggregator's tau^2 update). Worth
    /// disabling alongside `spectral_init`: when strong latent factors can
    /// express common shifts, an adapted consensus prior chases any
    /// consensus mass that drifts into them and the ratchet drains the
    /// consensus into u.v.
    pub adapt_y_prior: bool,
    /// Passes at the start of each call during which the latent prior
    /// variances sigma_u^2 and sigma_v^2 are held fixed. Updating them
    /// while the factors are still near zero shrinks the priors onto the
    /// cold factors and kills the latent channel before any correlation
    /// registers; holding them is still exact coordinate ascent.
    pub hyper_warmup: usize,
    /// Skip the hyperparameter M-step entirely (used by reduction tests
    /// that pin sigma_v^2 and friends).
    pub freeze_hyperparams: bool,
}

impl Default for IcovVbParams {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            iters: 100,
            tol: 1e-8,
            spectral_init: false,
            init_scale: 0.1,
            per_party_noise: true,
            adapt_y_prior: true,
            hyper_warmup: 40,
            freeze_hyperparams: false,
        }
    }
}

impl IcovVbParams {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(AggError::InvalidHyper("latent_dim must be >= 1".into()));
        }
        if self.iters == 0 {
            return Err(AggError::InvalidHyper("iters must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(AggError::InvalidHyper("tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// Posterior factor and noise variance of one party, as estimated by the
/// latest call.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyFactor {
    pub v_bar: DVector<f64>,
    pub psi: DMatrix<f64>,
    pub sigma_sq: f64,
    psi_logdet: f64,
}

/// Cross-round state of the latent-noise VB aggregator.
#[derive(Debug, Clone, PartialEq)]
pub struct IcovVbState {
    window: usize,
    latent_dim: usize,
    seed: u64,
    rounds: VecDeque<UpdateMatrix>,
    /// Cold-start hyperparameters for each call; overwritten with the
    /// call's final estimates, so pinning one (e.g. a tiny sigma_v_sq)
    /// sticks across calls when its M-step keeps it there.
    pub sigma_y_sq: f64,
    pub sigma_u_sq: f64,
    pub sigma_v_sq: f64,
    parties: BTreeMap<PartyId, PartyFactor>,
}

impl IcovVbState {
    pub fn new(latent_dim: usize, window: usize, seed: u64) -> Self {
        Self {
            window: window.max(1),
            latent_dim: latent_dim.max(1),
            seed,
            rounds: VecDeque::new(),
            sigma_y_sq: 1.0,
            sigma_u_sq: 0.1,
            sigma_v_sq: 0.1,
            parties: BTreeMap::new(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Rounds currently held in the sliding window.
    pub fn window_len(&self) -> usize {
        self.rounds.len()
    }

    pub fn party_factor(&self, party: PartyId) -> Option<&PartyFactor> {
        self.parties.get(&party)
    }

    pub fn sigma_sq(&self, party: PartyId) -> Option<f64> {
        self.parties.get(&party).map(|f| f.sigma_sq)
    }

    /// Aggregation weights of the consensus line: Sigma^-1 1 normalized,
    /// with Sigma = sigma_u^2 V V^T + diag(sigma_j^2) over the given
    /// participants, from the latest call's estimates.
    pub fn sigma_weights(&self, parties: &[PartyId]) -> Result<Vec<f64>> {
        let d = self.latent_dim;
        let mut v_sub = DMatrix::zeros(parties.len(), d);
        for (r, p) in parties.iter().enumerate() {
            let f = self.parties.get(p).ok_or(AggError::UnknownParty(*p))?;
            for c in 0..d {
                v_sub[(r, c)] = f.v_bar[c];
            }
        }
        let mut sigma = &v_sub * v_sub.transpose() * self.sigma_u_sq;
        for (i, p) in parties.iter().enumerate() {
            sigma[(i, i)] += self.parties[p].sigma_sq;
        }
        let (chol, _, _) = spd_cholesky(&sigma)?;
        let a = chol.solve(&DVector::from_element(parties.len(), 1.0));
        let denom = a.sum();
        Ok(a.iter().map(|v| v / denom).collect())
    }

    /// Current covariance model over all seen parties:
    /// sigma_u^2 V V^T + diag(sigma_j^2).
    pub fn covariance_model(&self) -> Result<CovarianceModel> {
        let ids: Vec<PartyId> = self.parties.keys().copied().collect();
        let d = self.latent_dim;
        let mut v = DMatrix::zeros(ids.len(), d);
        for (r, p) in ids.iter().enumerate() {
            for c in 0..d {
                v[(r, c)] = self.parties[p].v_bar[c];
            }
        }
        let mut phi = &v * v.transpose() * self.sigma_u_sq;
        for (r, p) in ids.iter().enumerate() {
            phi[(r, r)] += self.parties[p].sigma_sq;
        }
        CovarianceModel::full(ids, phi)
    }
}

/// Working posteriors during one call.
struct Factors {
    /// Per (round in batch): consensus posterior.
    lambda: Vec<f64>,
    y_bar: Vec<DVector<f64>>,
    /// Per (round in batch): task-feature posterior, D x D and D x K.
    phi: Vec<DMatrix<f64>>,
    phi_logdet: Vec<f64>,
    u_bar: Vec<DMatrix<f64>>,
    /// Per party: feature posterior and noise variance.
    factors: BTreeMap<PartyId, PartyFactor>,
}

/// Latent-noise VB aggregation: up to T block-coordinate passes over the
/// consensus, task-feature, and party-feature posteriors followed by the
/// hyperparameter M-step, across the window plus the rounds passed in.
/// Consensus is the final posterior mean of y_i.
pub fn icov_vb_aggregate(
    rounds: &[UpdateMatrix],
    state: &mut IcovVbState,
    params: &IcovVbParams,
) -> Result<Vec<AggregateResult>> {
    params.validate()?;
    if rounds.is_empty() {
        return Err(AggError::EmptyInput("no rounds to aggregate"));
    }
    if params.latent_dim != state.latent_dim {
        return Err(AggError::ShapeMismatch {
            expected: state.latent_dim,
            actual: params.latent_dim,
        });
    }
    let d = state.latent_dim;
    let batch: Vec<&UpdateMatrix> = state.rounds.iter().chain(rounds.iter()).collect();

    let mut sigma_y_sq = state.sigma_y_sq;
    let mut sigma_u_sq = state.sigma_u_sq;
    let mut sigma_v_sq = state.sigma_v_sq;

    let mut work = Factors {
        lambda: vec![sigma_y_sq; batch.len()],
        y_bar: batch.iter().map(|r| DVector::zeros(r.dim())).collect(),
        phi: vec![DMatrix::identity(d, d) * 0.1; batch.len()],
        phi_logdet: vec![d as f64 * 0.1f64.ln(); batch.len()],
        u_bar: batch.iter().map(|r| DMatrix::zeros(d, r.dim())).collect(),
        factors: BTreeMap::new(),
    };
    let (spectral, prepass_sigmas) = if params.spectral_init {
        spectral_features(&batch, d, sigma_u_sq)
    } else {
        (BTreeMap::new(), BTreeMap::new())
    };
    for round in &batch {
        for &p in round.party_ids() {
            work.factors.entry(p).or_insert_with(|| {
                let v_bar = spectral.get(&p).cloned().unwrap_or_else(|| {
                    let mut v_bar = DVector::zeros(d);
                    if params.init_scale > 0.0 {
                        let dist =
                            Normal::new(0.0, params.init_scale).expect("valid init scale");
                        let mut rng =
                            seedmix::stream(state.seed, "icov-vb-v-init", p.0 as u64, 0);
                        for c in 0..d {
                            v_bar[c] = dist.sample(&mut rng);
                        }
                    }
                    v_bar
                });
                // Starting every noise variance at 1 would make the first
                // consensus pass uniform and bake any structured bias into
                // the factors; the prepass estimates anchor it instead.
                let sigma_sq = prepass_sigmas.get(&p).copied().unwrap_or(1.0);
                PartyFactor {
                    v_bar,
                    psi: DMatrix::identity(d, d) * 0.1,
                    sigma_sq,
                    psi_logdet: d as f64 * 0.1f64.ln(),
                }
            });
        }
    }

    let mut trace: Vec<f64> = Vec::with_capacity(params.iters);
    let mut iterations = 0;
    for t in 1..=params.iters {
        update_y_block(&batch, sigma_y_sq, sigma_u_sq, &mut work)?;
        update_u_block(&batch, sigma_u_sq, &mut work)?;
        update_v_block(&batch, sigma_v_sq, &mut work)?;
        if !params.freeze_hyperparams {
            if params.adapt_y_prior {
                sigma_y_sq = m_step_sigma_y(&batch, &work);
            }
            m_step_noise(&batch, &mut work, params.per_party_noise);
            if t > params.hyper_warmup {
                sigma_u_sq = m_step_sigma_u(&batch, &work, d);
                sigma_v_sq = m_step_sigma_v(&work, d);
            }
        }
        let f = free_energy(&batch, sigma_y_sq, sigma_u_sq, sigma_v_sq, &work, d);
        iterations = t;
        let converged = t > params.hyper_warmup
            && trace
                .last()
                .is_some_and(|prev| (f - prev).abs() <= params.tol * (1.0 + prev.abs()));
        trace.push(f);
        if converged {
            break;
        }
    }
    if !params.freeze_hyperparams {
        // Refresh the consensus block so results reflect the final
        // hyperparameters.
        update_y_block(&batch, sigma_y_sq, sigma_u_sq, &mut work)?;
    }

    state.sigma_y_sq = sigma_y_sq;
    state.sigma_u_sq = sigma_u_sq;
    state.sigma_v_sq = sigma_v_sq;
    state.parties = work.factors;

    let offset = batch.len() - rounds.len();
    let results = rounds
        .iter()
        .enumerate()
        .map(|(i, round)| {
            let weights = state.sigma_weights(round.party_ids())?;
            Ok(AggregateResult {
                consensus: work.y_bar[offset + i].clone(),
                weights: Some(weights),
                iterations,
                objective_trace: Some(trace.clone()),
                posterior_var: Some(work.lambda[offset + i]),
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

/// Party features implied by the leading eigenpairs of the cross-party
/// residual covariance, averaged over co-occurrences, scaled so that
/// sigma_u^2 v v^T reproduces the leading covariance structure. Residuals
/// are taken about a short inverse-variance prepass consensus rather than
/// the uniform mean, so the leading directions reflect noise structure
/// instead of the consensus signal itself. Parties absent from the
/// estimate (or non-positive directions) fall back to the random
/// initialization.
fn spectral_features(
    batch: &[&UpdateMatrix],
    d: usize,
    sigma_u_sq: f64,
) -> (BTreeMap<PartyId, DVector<f64>>, BTreeMap<PartyId, f64>) {
    let mut ids: Vec<PartyId> = batch
        .iter()
        .flat_map(|r| r.party_ids().iter().copied())
        .collect();
    ids.sort();
    ids.dedup();
    let index: BTreeMap<PartyId, usize> = ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let n = ids.len();

    // Enough passes of the inverse-variance fixed point to anchor the
    // consensus on the low-noise parties; residuals about a consensus
    // that still carries structured bias would load that bias onto every
    // party's features.
    let mut sigmas: BTreeMap<PartyId, f64> = ids.iter().map(|&p| (p, 1.0)).collect();
    let mut consensuses: Vec<DVector<f64>> =
        batch.iter().map(|r| DVector::zeros(r.dim())).collect();
    for _ in 0..10 {
        for (i, round) in batch.iter().enumerate() {
            let mut numer = DVector::zeros(round.dim());
            let mut denom = 0.0;
            for (j, p) in round.party_ids().iter().enumerate() {
                let w = 1.0 / sigmas[p];
                numer.axpy(w, &round.column(j), 1.0);
                denom += w;
            }
            consensuses[i] = numer / denom;
        }
        let mut pooled: BTreeMap<PartyId, (f64, f64)> = BTreeMap::new();
        for (round, y) in batch.iter().zip(&consensuses) {
            for (j, &p) in round.party_ids().iter().enumerate() {
                let e = pooled.entry(p).or_insert((0.0, 0.0));
                e.0 += (round.column(j) - y).norm_squared();
                e.1 += round.dim() as f64;
            }
        }
        for (p, (num, den)) in pooled {
            sigmas.insert(p, (num / den).max(1e-30));
        }
    }

    let mut dot = DMatrix::<f64>::zeros(n, n);
    let mut count = DMatrix::<f64>::zeros(n, n);
    for (round, y) in batch.iter().zip(&consensuses) {
        let residuals: Vec<DVector<f64>> =
            (0..round.party_count()).map(|j| round.column(j) - y).collect();
        let k = round.dim() as f64;
        for (a, &pa) in round.party_ids().iter().enumerate() {
            for (b, &pb) in round.party_ids().iter().enumerate() {
                let (ia, ib) = (index[&pa], index[&pb]);
                dot[(ia, ib)] += residuals[a].dot(&residuals[b]);
                count[(ia, ib)] += k;
            }
        }
    }
    let cov = DMatrix::from_fn(n, n, |a, b| {
        if count[(a, b)] > 0.0 {
            dot[(a, b)] / count[(a, b)]
        } else {
            0.0
        }
    });
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let mut features = BTreeMap::new();
    for (row, &p) in ids.iter().enumerate() {
        let mut v = DVector::zeros(d);
        for c in 0..d.min(n) {
            let e = order[c];
            let value = eig.eigenvalues[e];
            if value > 0.0 {
                v[c] = eig.eigenvectors[(row, e)] * (value / sigma_u_sq).sqrt();
            }
        }
        features.insert(p, v);
    }
    (features, sigmas)
}

/// Collapsed consensus update: the task features are integrated out
/// exactly, so q(y_i) is the posterior under the marginal covariance
/// Sigma_i = sigma_u^2 V V^T + diag(sigma_j^2 + sigma_u^2 tr Psi_j).
///
/// A mean-field consensus update (subtracting the posterior-mean latent
/// bias) leaves a shrinkage deficit that correlates with the latent
/// means; the factors then grow to absorb the consensus itself and the
/// posterior mean drains into u.v. Collapsing removes that feedback path:
/// the consensus update never sees the latent means.
fn update_y_block(
    batch: &[&UpdateMatrix],
    sigma_y_sq: f64,
    sigma_u_sq: f64,
    work: &mut Factors,
) -> Result<()> {
    let d = work.phi[0].nrows();
    for (i, round) in batch.iter().enumerate() {
        let n = round.party_count();
        let mut v_sub = DMatrix::zeros(n, d);
        for (r, p) in round.party_ids().iter().enumerate() {
            let f = &work.factors[p];
            for c in 0..d {
                v_sub[(r, c)] = f.v_bar[c];
            }
        }
        let mut sigma = &v_sub * v_sub.transpose() * sigma_u_sq;
        for (r, p) in round.party_ids().iter().enumerate() {
            let f = &work.factors[p];
            sigma[(r, r)] += f.sigma_sq + sigma_u_sq * f.psi.trace();
        }
        let (chol, _, _) = spd_cholesky(&sigma)?;
        let a = chol.solve(&DVector::from_element(n, 1.0));
        work.lambda[i] = 1.0 / (1.0 / sigma_y_sq + a.sum());
        work.y_bar[i] = round.values() * a * work.lambda[i];
    }
    Ok(())
}

fn update_u_block(batch: &[&UpdateMatrix], sigma_u_sq: f64, work: &mut Factors) -> Result<()> {
    let d = work.phi[0].nrows();
    for (i, round) in batch.iter().enumerate() {
        let mut precision = DMatrix::identity(d, d) / sigma_u_sq;
        // Projection sum_j v_bar_j r_ij^T / sigma_j^2, D x K.
        let mut projection = DMatrix::zeros(d, round.dim());
        for (j, p) in round.party_ids().iter().enumerate() {
            let f = &work.factors[p];
            precision += (&f.psi + &f.v_bar * f.v_bar.transpose()) / f.sigma_sq;
            let r_ij = round.column(j) - &work.y_bar[i];
            projection += &f.v_bar * r_ij.transpose() / f.sigma_sq;
        }
        let (chol, _, _) = spd_cholesky(&precision)?;
        let prec_logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let phi = chol.inverse();
        work.u_bar[i] = &phi * projection;
        work.phi[i] = phi;
        work.phi_logdet[i] = -prec_logdet;
    }
    Ok(())
}

fn update_v_block(batch: &[&UpdateMatrix], sigma_v_sq: f64, work: &mut Factors) -> Result<()> {
    let d = work.phi[0].nrows();
    let mut seconds: BTreeMap<PartyId, DMatrix<f64>> = BTreeMap::new();
    let mut projections: BTreeMap<PartyId, DVector<f64>> = BTreeMap::new();
    for p in work.factors.keys() {
        seconds.insert(*p, DMatrix::zeros(d, d));
        projections.insert(*p, DVector::zeros(d));
    }
    for (i, round) in batch.iter().enumerate() {
        let second =
            &work.phi[i] * round.dim() as f64 + &work.u_bar[i] * work.u_bar[i].transpose();
        for (j, p) in round.party_ids().iter().enumerate() {
            let r_ij = round.column(j) - &work.y_bar[i];
            *seconds.get_mut(p).expect("registered") += &second;
            *projections.get_mut(p).expect("registered") += &work.u_bar[i] * r_ij;
        }
    }
    for (p, factor) in work.factors.iter_mut() {
        let precision = DMatrix::identity(d, d) / sigma_v_sq + &seconds[p] / factor.sigma_sq;
        let (chol, _, _) = spd_cholesky(&precision)?;
        let prec_logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        factor.psi = chol.inverse();
        factor.psi_logdet = -prec_logdet;
        factor.v_bar = &factor.psi * &projections[p] / factor.sigma_sq;
    }
    Ok(())
}

/// Per-(round, party) expected squared residual under the posteriors:
/// K lambda + ||r||^2 - 2 (U r) . v_bar + tr((K Phi + U U^T)(Psi + v v^T)).
fn expected_sq_residual(
    k: f64,
    lambda: f64,
    residual: &DVector<f64>,
    u_second: &DMatrix<f64>,
    u_bar: &DMatrix<f64>,
    factor: &PartyFactor,
) -> f64 {
    let v_second = &factor.psi + &factor.v_bar * factor.v_bar.transpose();
    let cross = (u_bar * residual).dot(&factor.v_bar);
    k * lambda + residual.norm_squared() - 2.0 * cross + (u_second * v_second).trace()
}

fn m_step_sigma_y(batch: &[&UpdateMatrix], work: &Factors) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, round) in batch.iter().enumerate() {
        let k = round.dim() as f64;
        num += k * work.lambda[i] + work.y_bar[i].norm_squared();
        den += k;
    }
    (num / den).max(VAR_FLOOR)
}

fn m_step_sigma_u(batch: &[&UpdateMatrix], work: &Factors, d: usize) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, round) in batch.iter().enumerate() {
        let k = round.dim() as f64;
        num += k * work.phi[i].trace() + work.u_bar[i].norm_squared();
        den += k;
    }
    num / (d as f64 * den)
}

fn m_step_sigma_v(work: &Factors, d: usize) -> f64 {
    let num: f64 = work
        .factors
        .values()
        .map(|f| f.psi.trace() + f.v_bar.norm_squared())
        .sum();
    num / (d as f64 * work.factors.len() as f64)
}

fn m_step_noise(batch: &[&UpdateMatrix], work: &mut Factors, per_party: bool) {
    let mut pooled: BTreeMap<PartyId, (f64, f64)> = BTreeMap::new();
    for (i, round) in batch.iter().enumerate() {
        let k = round.dim() as f64;
        let second =
            &work.phi[i] * k + &work.u_bar[i] * work.u_bar[i].transpose();
        for (j, p) in round.party_ids().iter().enumerate() {
            let r_ij = round.column(j) - &work.y_bar[i];
            let s = expected_sq_residual(
                k,
                work.lambda[i],
                &r_ij,
                &second,
                &work.u_bar[i],
                &work.factors[p],
            );
            let e = pooled.entry(*p).or_insert((0.0, 0.0));
            e.0 += s;
            e.1 += k;
        }
    }
    if per_party {
        for (p, (num, den)) in pooled {
            work.factors.get_mut(&p).expect("registered").sigma_sq =
                (num / den).max(VAR_FLOOR);
        }
    } else {
        let num: f64 = pooled.values().map(|e| e.0).sum();
        let den: f64 = pooled.values().map(|e| e.1).sum();
        let shared = (num / den).max(VAR_FLOOR);
        for factor in work.factors.values_mut() {
            factor.sigma_sq = shared;
        }
    }
}

/// Variational free energy over the windowed model.
fn free_energy(
    batch: &[&UpdateMatrix],
    sigma_y_sq: f64,
    sigma_u_sq: f64,
    sigma_v_sq: f64,
    work: &Factors,
    d: usize,
) -> f64 {
    let d = d as f64;
    let mut f = 0.0;
    for (i, round) in batch.iter().enumerate() {
        let k = round.dim() as f64;
        let lambda = work.lambda[i];
        // Consensus prior and entropy.
        f += -0.5 * k * (LN_2PI + sigma_y_sq.ln())
            - (k * lambda + work.y_bar[i].norm_squared()) / (2.0 * sigma_y_sq);
        f += 0.5 * k * (1.0 + LN_2PI + lambda.ln());
        // Task-feature prior and entropy.
        f += -0.5 * k * d * (LN_2PI + sigma_u_sq.ln())
            - (k * work.phi[i].trace() + work.u_bar[i].norm_squared()) / (2.0 * sigma_u_sq);
        f += 0.5 * k * (d * (1.0 + LN_2PI) + work.phi_logdet[i]);
        // Data terms under per-party noise.
        let second =
            &work.phi[i] * k + &work.u_bar[i] * work.u_bar[i].transpose();
        for (j, p) in round.party_ids().iter().enumerate() {
            let factor = &work.factors[p];
            let r_ij = round.column(j) - &work.y_bar[i];
            let s = expected_sq_residual(k, lambda, &r_ij, &second, &work.u_bar[i], factor);
            f += -0.5 * k * (LN_2PI + factor.sigma_sq.ln()) - s / (2.0 * factor.sigma_sq);
        }
    }
    // Party-feature prior and entropy terms.
    for factor in work.factors.values() {
        f += -0.5 * d * (LN_2PI + sigma_v_sq.ln())
            - (factor.psi.trace() + factor.v_bar.norm_squared()) / (2.0 * sigma_v_sq);
        f += 0.5 * (d * (1.0 + LN_2PI) + factor.psi_logdet);
    }
    f
}
