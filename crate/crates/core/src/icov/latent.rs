//! Latent-factor covariance MLE: the noise covariance is parameterized as
//! sigma_u^2 V V^T + sigma^2 I and fitted by per-round gradient ascent on
//! the Gaussian log-likelihood, alternating with the consensus MLE.

use super::{mle_consensus_given_phi, spd_cholesky, CovarianceModel};
use crate::error::{AggError, Result};
use crate::seedmix;
use crate::update::{AggregateResult, PartyId, UpdateMatrix};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use std::collections::{BTreeMap, BTreeSet};

/// Hyperparameters of the latent-factor MLE.
#[derive(Debug, Clone, PartialEq)]
pub struct IcovMleParams {
    /// Latent dimension D.
    pub latent_dim: usize,
    /// Gradient-ascent step size.
    pub lr: f64,
    /// Sweeps over the round set.
    pub epochs: usize,
    /// Standard deviation of the latent feature initialization.
    pub init_scale: f64,
}

impl Default for IcovMleParams {
    fn default() -> Self {
        Self {
            latent_dim: 2,
            lr: 1e-3,
            epochs: 200,
            init_scale: 0.1,
        }
    }
}

impl IcovMleParams {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(AggError::InvalidHyper("latent_dim must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(AggError::InvalidHyper("lr must be > 0".into()));
        }
        if self.epochs == 0 {
            return Err(AggError::InvalidHyper("epochs must be >= 1".into()));
        }
        if !(self.init_scale >= 0.0) {
            return Err(AggError::InvalidHyper("init_scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Log-likelihood value and analytic gradients for one round.
#[derive(Debug, Clone)]
pub struct LatentGrads {
    /// E_i = -K log|Phi| - sum_k delta_k^T Phi^-1 delta_k (constants dropped).
    pub loglik: f64,
    /// Gradient with respect to the participating rows of V, |J_i| x D.
    pub grad_v: DMatrix<f64>,
    pub grad_sigma_sq: f64,
    pub grad_sigma_u_sq: f64,
}

/// Per-round log-likelihood and gradients of the latent covariance model.
///
/// `v_sub` holds the participating parties' latent rows (|J_i| x D) and
/// `residual` the centered updates x_ij - y_i as a K x |J_i| matrix.
pub fn latent_round_gradients(
    v_sub: &DMatrix<f64>,
    sigma_sq: f64,
    sigma_u_sq: f64,
    residual: &DMatrix<f64>,
) -> Result<LatentGrads> {
    let n = v_sub.nrows();
    if residual.ncols() != n {
        return Err(AggError::ShapeMismatch {
            expected: n,
            actual: residual.ncols(),
        });
    }
    let k = residual.nrows() as f64;
    let mut phi = v_sub * v_sub.transpose() * sigma_u_sq;
    for i in 0..n {
        phi[(i, i)] += sigma_sq;
    }
    let (chol, _, _) = spd_cholesky(&phi)?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();

    // M = sum_k delta_k delta_k^T = R^T R.
    let m = residual.transpose() * residual;
    let phi_inv_m = chol.solve(&m);
    let quad = phi_inv_m.trace();
    let loglik = -k * logdet - quad;

    // G = Phi^-1 M Phi^-1 - K Phi^-1.
    let phi_inv = chol.inverse();
    let g = chol.solve(&phi_inv_m.transpose()) - &phi_inv * k;

    let grad_v = &g * v_sub * (2.0 * sigma_u_sq);
    let grad_sigma_sq = g.trace();
    let grad_sigma_u_sq = (&g * (v_sub * v_sub.transpose())).trace();
    Ok(LatentGrads {
        loglik,
        grad_v,
        grad_sigma_sq,
        grad_sigma_u_sq,
    })
}

// Log-space variance steps are clamped per update so a single early
// gradient cannot underflow or overflow sigma^2; a genuinely unstable step
// size still oscillates and trips the divergence check.
const MAX_LOG_STEP: f64 = 2.0;

/// Fit the latent covariance model over a round set.
///
/// Each epoch recomputes every round's consensus from the current
/// covariance (the exact MLE for fixed Phi) and then sweeps the rounds with
/// gradient ascent on V, sigma^2 and sigma_u^2, the variances updated in
/// log-space. Latent rows are seeded per party so permuting the input does
/// not change any party's initialization.
pub fn icov_mle_fit(
    rounds: &[UpdateMatrix],
    params: &IcovMleParams,
    seed: u64,
) -> Result<(CovarianceModel, Vec<AggregateResult>)> {
    params.validate()?;
    if rounds.is_empty() {
        return Err(AggError::EmptyInput("no rounds to fit"));
    }
    let universe: BTreeSet<PartyId> = rounds
        .iter()
        .flat_map(|r| r.party_ids().iter().copied())
        .collect();
    let ids: Vec<PartyId> = universe.into_iter().collect();
    let index: BTreeMap<PartyId, usize> = ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let d = params.latent_dim;

    let mut v = DMatrix::zeros(ids.len(), d);
    if params.init_scale > 0.0 {
        let dist = Normal::new(0.0, params.init_scale).expect("valid init scale");
        for (row, &p) in ids.iter().enumerate() {
            let mut rng = seedmix::stream(seed, "icov-v-init", p.0 as u64, 0);
            for c in 0..d {
                v[(row, c)] = dist.sample(&mut rng);
            }
        }
    }
    let mut sigma_sq = 1.0f64;
    let mut sigma_u_sq = 0.1f64;

    let mut prev_epoch_ll = f64::NEG_INFINITY;
    for epoch in 0..params.epochs {
        // (a) Consensus pass with the current covariance.
        let consensuses = consensus_pass(rounds, &index, &v, sigma_sq, sigma_u_sq)?;

        // (b) Gradient sweep.
        let mut epoch_ll = 0.0;
        for (round, y) in rounds.iter().zip(&consensuses) {
            let positions: Vec<usize> = round.party_ids().iter().map(|p| index[p]).collect();
            let v_sub = DMatrix::from_fn(positions.len(), d, |r, c| v[(positions[r], c)]);
            let residual = center(round, y);
            let grads = latent_round_gradients(&v_sub, sigma_sq, sigma_u_sq, &residual)?;
            epoch_ll += grads.loglik;

            for (r, &pos) in positions.iter().enumerate() {
                for c in 0..d {
                    v[(pos, c)] += params.lr * grads.grad_v[(r, c)];
                }
            }
            let step_s = (params.lr * grads.grad_sigma_sq * sigma_sq)
                .clamp(-MAX_LOG_STEP, MAX_LOG_STEP);
            sigma_sq *= step_s.exp();
            let step_u = (params.lr * grads.grad_sigma_u_sq * sigma_u_sq)
                .clamp(-MAX_LOG_STEP, MAX_LOG_STEP);
            sigma_u_sq *= step_u.exp();
        }
        if !epoch_ll.is_finite() {
            return Err(AggError::StepSize { epoch });
        }
        if epoch_ll < prev_epoch_ll - (0.1 * prev_epoch_ll.abs()).max(10.0) {
            return Err(AggError::StepSize { epoch });
        }
        prev_epoch_ll = epoch_ll;
    }

    let model = CovarianceModel::latent(ids.clone(), v.clone(), sigma_u_sq, sigma_sq)?;
    let results = rounds
        .iter()
        .map(|round| {
            let phi_sub = model.submatrix(round.party_ids())?;
            mle_consensus_given_phi(round, &phi_sub)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((model, results))
}

fn consensus_pass(
    rounds: &[UpdateMatrix],
    index: &BTreeMap<PartyId, usize>,
    v: &DMatrix<f64>,
    sigma_sq: f64,
    sigma_u_sq: f64,
) -> Result<Vec<DVector<f64>>> {
    rounds
        .iter()
        .map(|round| {
            let positions: Vec<usize> = round.party_ids().iter().map(|p| index[p]).collect();
            let d = v.ncols();
            let v_sub = DMatrix::from_fn(positions.len(), d, |r, c| v[(positions[r], c)]);
            let mut phi = &v_sub * v_sub.transpose() * sigma_u_sq;
            for i in 0..phi.nrows() {
                phi[(i, i)] += sigma_sq;
            }
            Ok(mle_consensus_given_phi(round, &phi)?.consensus)
        })
        .collect()
}

fn center(round: &UpdateMatrix, y: &DVector<f64>) -> DMatrix<f64> {
    let mut r = round.values().clone();
    for j in 0..r.ncols() {
        for k in 0..r.nrows() {
            r[(k, j)] -= y[k];
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng as _;
    use rand::SeedableRng;

    fn ids(v: &[u32]) -> Vec<PartyId> {
        v.iter().map(|&i| PartyId(i)).collect()
    }

    /// Oracle evaluation of E_i through explicit inversion and determinant,
    /// independent of the Cholesky path used by the implementation.
    fn loglik_oracle(
        v_sub: &DMatrix<f64>,
        sigma_sq: f64,
        sigma_u_sq: f64,
        residual: &DMatrix<f64>,
    ) -> f64 {
        let n = v_sub.nrows();
        let mut phi = v_sub * v_sub.transpose() * sigma_u_sq;
        for i in 0..n {
            phi[(i, i)] += sigma_sq;
        }
        let det = phi.determinant();
        let inv = phi.try_inverse().unwrap();
        let k = residual.nrows();
        let mut quad = 0.0;
        for row in 0..k {
            let delta = DVector::from_fn(n, |j, _| residual[(row, j)]);
            quad += delta.dot(&(&inv * &delta));
        }
        -(k as f64) * det.ln() - quad
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..5 {
            let n = 4;
            let d = 2;
            let v_sub = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
            let residual = DMatrix::from_fn(1, n, |_, _| rng.random_range(-2.0..2.0));
            let sigma_sq = rng.random_range(0.5..2.0);
            let sigma_u_sq = rng.random_range(0.2..1.5);

            let grads = latent_round_gradients(&v_sub, sigma_sq, sigma_u_sq, &residual).unwrap();
            let base_check = loglik_oracle(&v_sub, sigma_sq, sigma_u_sq, &residual);
            assert_relative_eq!(grads.loglik, base_check, max_relative = 1e-10);

            for r in 0..n {
                for c in 0..d {
                    let mut plus = v_sub.clone();
                    let mut minus = v_sub.clone();
                    plus[(r, c)] += h;
                    minus[(r, c)] -= h;
                    let fd = (loglik_oracle(&plus, sigma_sq, sigma_u_sq, &residual)
                        - loglik_oracle(&minus, sigma_sq, sigma_u_sq, &residual))
                        / (2.0 * h);
                    assert_relative_eq!(grads.grad_v[(r, c)], fd, max_relative = 1e-5);
                }
            }
            let fd_s = (loglik_oracle(&v_sub, sigma_sq + h, sigma_u_sq, &residual)
                - loglik_oracle(&v_sub, sigma_sq - h, sigma_u_sq, &residual))
                / (2.0 * h);
            assert_relative_eq!(grads.grad_sigma_sq, fd_s, max_relative = 1e-5);
            let fd_u = (loglik_oracle(&v_sub, sigma_sq, sigma_u_sq + h, &residual)
                - loglik_oracle(&v_sub, sigma_sq, sigma_u_sq - h, &residual))
                / (2.0 * h);
            assert_relative_eq!(grads.grad_sigma_u_sq, fd_u, max_relative = 1e-5);
        }
    }

    #[test]
    fn zero_latent_rows_reduce_to_arithmetic_mean() {
        let cols = [
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![3.0, -2.0]),
            DVector::from_vec(vec![5.0, 6.0]),
        ];
        let x = UpdateMatrix::from_columns(0, ids(&[0, 1, 2]), &cols).unwrap();
        let params = IcovMleParams {
            init_scale: 0.0,
            epochs: 5,
            ..IcovMleParams::default()
        };
        let (model, results) = icov_mle_fit(&[x], &params, 1).unwrap();
        match model.mode() {
            super::super::CovMode::Latent { v, .. } => assert!(v.iter().all(|&e| e == 0.0)),
            _ => panic!("expected latent mode"),
        }
        assert_relative_eq!(results[0].consensus[0], 3.0, epsilon = 1e-9);
        assert_relative_eq!(results[0].consensus[1], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn colluding_pair_gets_largest_off_diagonal() {
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let bias = Normal::new(0.0, 2.0).unwrap();
        let mut rounds = Vec::new();
        for i in 0..60u64 {
            let y: f64 = Normal::new(0.0, 1.0).unwrap().sample(&mut rng);
            let shared: f64 = bias.sample(&mut rng);
            let cols: Vec<DVector<f64>> = (0..5)
                .map(|j| {
                    let b = if j < 2 { shared } else { 0.0 };
                    DVector::from_vec(vec![y + b + noise.sample(&mut rng)])
                })
                .collect();
            rounds.push(UpdateMatrix::from_columns(i, ids(&[0, 1, 2, 3, 4]), &cols).unwrap());
        }
        let params = IcovMleParams {
            latent_dim: 1,
            lr: 2e-3,
            epochs: 300,
            ..IcovMleParams::default()
        };
        let (model, _) = icov_mle_fit(&rounds, &params, 13).unwrap();
        let phi = model.phi();
        let colluding = phi[(0, 1)];
        for a in 0..5 {
            for b in (a + 1)..5 {
                if (a, b) != (0, 1) {
                    assert!(
                        colluding > phi[(a, b)],
                        "phi[0,1]={colluding} not above phi[{a},{b}]={}",
                        phi[(a, b)]
                    );
                }
            }
        }
    }

    #[test]
    fn diverging_step_size_is_reported() {
        // An unstable step size makes the noise variance overshoot its
        // stationary point back and forth; the epoch log-likelihood then
        // swings far below its previous value.
        let cols = [
            DVector::from_element(30, 10.0),
            DVector::from_element(30, -10.0),
        ];
        let x = UpdateMatrix::from_columns(0, ids(&[0, 1]), &cols).unwrap();
        let params = IcovMleParams {
            lr: 3.0,
            epochs: 50,
            ..IcovMleParams::default()
        };
        let r = icov_mle_fit(&[x], &params, 1);
        assert!(matches!(r, Err(AggError::StepSize { .. })), "got {r:?}");
    }
}
