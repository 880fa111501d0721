//! Inverse-covariance weighting: exact joint MLE with a full cross-party
//! covariance, the overlap-induced covariance, a latent-factor MLE fitted by
//! gradient ascent, and the latent-noise variational-Bayes aggregator.

mod latent;
mod vb;

pub use latent::{icov_mle_fit, latent_round_gradients, IcovMleParams, LatentGrads};
pub use vb::{icov_vb_aggregate, IcovVbParams, IcovVbState};

use crate::error::{AggError, Result};
use crate::update::{AggregateResult, PartyId, UpdateMatrix};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use std::collections::{BTreeMap, BTreeSet};

/// Symmetrize and, if needed, jitter a matrix until a Cholesky
/// factorization succeeds. Returns the factorization, the (possibly
/// jittered) matrix, and the jitter applied.
pub(crate) fn spd_cholesky(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, DMatrix<f64>, f64)> {
    let n = m.nrows();
    let mut sym = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            sym[(i, j)] = 0.5 * (m[(i, j)] + m[(j, i)]);
        }
    }
    if let Some(chol) = try_positive_cholesky(&sym) {
        return Ok((chol, sym, 0.0));
    }
    let trace: f64 = sym.diagonal().sum();
    let scale = if trace > 0.0 { trace / n as f64 } else { 1.0 };
    let mut jitter = 1e-9 * scale;
    for _ in 0..=3 {
        let mut jittered = sym.clone();
        for i in 0..n {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = try_positive_cholesky(&jittered) {
            return Ok((chol, jittered, jitter));
        }
        jitter *= 10.0;
    }
    Err(AggError::NotPositiveDefinite)
}

/// Cholesky that also rejects zero or non-finite pivots, which nalgebra
/// tolerates for semidefinite inputs.
fn try_positive_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(m.clone())?;
    let ok = chol.l_dirty().diagonal().iter().all(|&d| d > 0.0 && d.is_finite());
    ok.then_some(chol)
}

/// Covariance structure of the party noise, either estimated entry-wise or
/// parameterized as sigma_u^2 V V^T + sigma^2 I.
#[derive(Debug, Clone, PartialEq)]
pub enum CovMode {
    Full,
    Latent {
        /// J x D latent feature matrix, row j belonging to `party_ids[j]`.
        v: DMatrix<f64>,
        sigma_u_sq: f64,
        sigma_sq: f64,
    },
}

/// A symmetric positive-definite cross-party covariance with its party
/// index.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    party_ids: Vec<PartyId>,
    phi: DMatrix<f64>,
    mode: CovMode,
    jitter: f64,
}

impl CovarianceModel {
    /// Wrap an explicit covariance estimate; the matrix is symmetrized and
    /// jittered until positive definite.
    pub fn full(party_ids: Vec<PartyId>, phi: DMatrix<f64>) -> Result<Self> {
        if phi.nrows() != party_ids.len() || phi.ncols() != party_ids.len() {
            return Err(AggError::ShapeMismatch {
                expected: party_ids.len(),
                actual: phi.nrows(),
            });
        }
        let asym = (0..phi.nrows())
            .flat_map(|i| (0..phi.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| (phi[(i, j)] - phi[(j, i)]).abs())
            .fold(0.0f64, f64::max);
        if asym > 1e-10 {
            return Err(AggError::InvalidSpec(format!(
                "covariance not symmetric: max asymmetry {asym:e}"
            )));
        }
        let (_, jittered, jitter) = spd_cholesky(&phi)?;
        Ok(Self {
            party_ids,
            phi: jittered,
            mode: CovMode::Full,
            jitter,
        })
    }

    /// Build the low-rank-plus-diagonal covariance sigma_u^2 V V^T + sigma^2 I.
    pub fn latent(
        party_ids: Vec<PartyId>,
        v: DMatrix<f64>,
        sigma_u_sq: f64,
        sigma_sq: f64,
    ) -> Result<Self> {
        if v.nrows() != party_ids.len() {
            return Err(AggError::ShapeMismatch {
                expected: party_ids.len(),
                actual: v.nrows(),
            });
        }
        if !(sigma_sq > 0.0) || !(sigma_u_sq > 0.0) {
            return Err(AggError::InvalidHyper(
                "latent covariance needs sigma_sq > 0 and sigma_u_sq > 0".into(),
            ));
        }
        let mut phi = &v * v.transpose() * sigma_u_sq;
        for i in 0..phi.nrows() {
            phi[(i, i)] += sigma_sq;
        }
        Ok(Self {
            party_ids,
            phi,
            mode: CovMode::Latent {
                v,
                sigma_u_sq,
                sigma_sq,
            },
        jitter: 0.0,
        })
    }

    pub fn party_ids(&self) -> &[PartyId] {
        &self.party_ids
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn mode(&self) -> &CovMode {
        &self.mode
    }

    /// Jitter added to the diagonal to reach positive definiteness.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Covariance submatrix for a participant subset.
    pub fn submatrix(&self, parties: &[PartyId]) -> Result<DMatrix<f64>> {
        let positions: Vec<usize> = parties
            .iter()
            .map(|p| {
                self.party_ids
                    .iter()
                    .position(|q| q == p)
                    .ok_or(AggError::UnknownParty(*p))
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(positions.len(), positions.len(), |i, j| {
            self.phi[(positions[i], positions[j])]
        }))
    }
}

/// Consensus MLE for a fixed covariance: y = X Phi^-1 1 / (1^T Phi^-1 1),
/// computed through an SPD solve. Weights may be negative but sum to one.
pub fn mle_consensus_given_phi(x: &UpdateMatrix, phi_sub: &DMatrix<f64>) -> Result<AggregateResult> {
    let n = x.party_count();
    if phi_sub.nrows() != n || phi_sub.ncols() != n {
        return Err(AggError::ShapeMismatch {
            expected: n,
            actual: phi_sub.nrows(),
        });
    }
    let (chol, _, _) = spd_cholesky(phi_sub)?;
    let a = chol.solve(&DVector::from_element(n, 1.0));
    let denom: f64 = a.sum();
    if !denom.is_finite() || denom <= 0.0 {
        return Err(AggError::NotPositiveDefinite);
    }
    let weights: Vec<f64> = a.iter().map(|v| v / denom).collect();
    let mut consensus = DVector::zeros(x.dim());
    for (j, &w) in weights.iter().enumerate() {
        consensus.axpy(w, &x.column(j), 1.0);
    }
    if consensus.iter().any(|v| !v.is_finite()) {
        return Err(AggError::Numerical { iteration: 0 });
    }
    Ok(AggregateResult::closed_form(consensus, Some(weights)))
}

/// Multi-round covariance MLE for fixed consensuses:
/// Phi_jj' = sum over co-occurring rounds of residual inner products,
/// normalized by K times the co-occurrence count.
///
/// Pairs that never co-occur fall back to zero and are reported alongside
/// the model.
pub fn mle_phi_given_consensus(
    rounds: &[UpdateMatrix],
    consensuses: &[DVector<f64>],
) -> Result<(CovarianceModel, Vec<(PartyId, PartyId)>)> {
    if rounds.is_empty() {
        return Err(AggError::EmptyInput("no rounds for covariance estimate"));
    }
    if rounds.len() != consensuses.len() {
        return Err(AggError::ShapeMismatch {
            expected: rounds.len(),
            actual: consensuses.len(),
        });
    }
    let universe: BTreeSet<PartyId> = rounds
        .iter()
        .flat_map(|r| r.party_ids().iter().copied())
        .collect();
    let ids: Vec<PartyId> = universe.into_iter().collect();
    let index: BTreeMap<PartyId, usize> = ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let n = ids.len();

    let mut dot = DMatrix::<f64>::zeros(n, n);
    let mut count = DMatrix::<f64>::zeros(n, n);
    for (round, y) in rounds.iter().zip(consensuses) {
        if y.len() != round.dim() {
            return Err(AggError::ShapeMismatch {
                expected: round.dim(),
                actual: y.len(),
            });
        }
        let residuals: Vec<DVector<f64>> = (0..round.party_count())
            .map(|j| round.column(j) - y)
            .collect();
        let k = round.dim() as f64;
        for (a, &pa) in round.party_ids().iter().enumerate() {
            for (b, &pb) in round.party_ids().iter().enumerate() {
                let (ia, ib) = (index[&pa], index[&pb]);
                dot[(ia, ib)] += residuals[a].dot(&residuals[b]);
                count[(ia, ib)] += k;
            }
        }
    }

    let mut missing = Vec::new();
    let mut phi = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if count[(i, j)] > 0.0 {
                phi[(i, j)] = dot[(i, j)] / count[(i, j)];
            } else if i < j {
                missing.push((ids[i], ids[j]));
            }
        }
    }
    if n >= 2 {
        let any_pair = (0..n).any(|i| (i + 1..n).any(|j| count[(i, j)] > 0.0));
        if !any_pair {
            return Err(AggError::DegenerateEstimate);
        }
    }
    let model = CovarianceModel::full(ids, phi)?;
    Ok((model, missing))
}

/// Known sample sizes and pairwise overlap counts, plus the per-example
/// noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapSpec {
    party_ids: Vec<PartyId>,
    sizes: Vec<usize>,
    /// overlaps[i][j] = |D_i intersect D_j|; diagonal holds |D_i|.
    overlaps: Vec<Vec<usize>>,
    sigma_sq: f64,
}

impl OverlapSpec {
    pub fn new(
        party_ids: Vec<PartyId>,
        sizes: Vec<usize>,
        overlaps: Vec<Vec<usize>>,
        sigma_sq: f64,
    ) -> Result<Self> {
        let n = party_ids.len();
        if sizes.len() != n || overlaps.len() != n || overlaps.iter().any(|r| r.len() != n) {
            return Err(AggError::InvalidSpec("overlap matrix shape mismatch".into()));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(AggError::InvalidSpec("zero sample size".into()));
        }
        if !(sigma_sq > 0.0) {
            return Err(AggError::InvalidSpec("sigma_sq must be > 0".into()));
        }
        for i in 0..n {
            if overlaps[i][i] != sizes[i] {
                return Err(AggError::InvalidSpec(format!(
                    "overlap({p},{p}) must equal |D_{p}|",
                    p = party_ids[i]
                )));
            }
            for j in 0..n {
                if overlaps[i][j] != overlaps[j][i] {
                    return Err(AggError::InvalidSpec("overlap matrix not symmetric".into()));
                }
                if overlaps[i][j] > sizes[i].min(sizes[j]) {
                    return Err(AggError::InvalidSpec(format!(
                        "overlap({},{}) exceeds the smaller sample",
                        party_ids[i], party_ids[j]
                    )));
                }
            }
        }
        Ok(Self {
            party_ids,
            sizes,
            overlaps,
            sigma_sq,
        })
    }

    pub fn party_ids(&self) -> &[PartyId] {
        &self.party_ids
    }
}

/// Covariance induced by overlapping local samples:
/// Phi_jj' = |D_j intersect D_j'| sigma^2 / (|D_j| |D_j'|).
pub fn overlap_phi(spec: &OverlapSpec) -> Result<CovarianceModel> {
    let n = spec.party_ids.len();
    let phi = DMatrix::from_fn(n, n, |i, j| {
        spec.overlaps[i][j] as f64 * spec.sigma_sq / (spec.sizes[i] as f64 * spec.sizes[j] as f64)
    });
    CovarianceModel::full(spec.party_ids.clone(), phi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ids(v: &[u32]) -> Vec<PartyId> {
        v.iter().map(|&i| PartyId(i)).collect()
    }

    fn matrix(round: u64, k: usize, cols: &[&[f64]]) -> UpdateMatrix {
        let ids = (0..cols.len() as u32).map(PartyId).collect();
        let values = DMatrix::from_fn(k, cols.len(), |r, c| cols[c][r]);
        UpdateMatrix::new(round, ids, values).unwrap()
    }

    #[test]
    fn diagonal_phi_reduces_to_inverse_variance() {
        let x = matrix(0, 2, &[&[1.0, 0.0], &[3.0, 2.0], &[-1.0, 4.0]]);
        let sigmas = [0.5, 2.0, 1.0];
        let phi = DMatrix::from_diagonal(&DVector::from_row_slice(&sigmas));
        let r = mle_consensus_given_phi(&x, &phi).unwrap();

        // Direct inverse-variance weighting.
        let inv: Vec<f64> = sigmas.iter().map(|s| 1.0 / s).collect();
        let total: f64 = inv.iter().sum();
        for k in 0..2 {
            let expected: f64 = (0..3).map(|j| inv[j] / total * x.values()[(k, j)]).sum();
            assert_relative_eq!(r.consensus[k], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_phi_gives_arithmetic_mean() {
        let x = matrix(0, 1, &[&[1.0], &[2.0], &[6.0]]);
        let phi = DMatrix::identity(3, 3);
        let r = mle_consensus_given_phi(&x, &phi).unwrap();
        assert_relative_eq!(r.consensus[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn correlated_pair_is_discounted() {
        // Phi with two strongly correlated parties and one independent one.
        // The oracle 3x3 solve gives each correlated party less weight than
        // the loner, and the pair jointly less than the 2/3 it would get
        // under an uncorrelated covariance: a = Phi^-1 1 solves to
        // (1/1.9, 1/1.9, 1), i.e. weights (0.256..., 0.256..., 0.487...).
        let phi = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.9, 0.0, 0.9, 1.0, 0.0, 0.0, 0.0, 1.0],
        );
        // Oracle: solve Phi a = 1 by explicit inversion.
        let a = phi.clone().try_inverse().unwrap() * DVector::from_element(3, 1.0);
        let w: Vec<f64> = a.iter().map(|v| v / a.sum()).collect();
        assert_relative_eq!(w[0], (1.0 / 1.9) / (2.0 / 1.9 + 1.0), epsilon = 1e-12);

        let x = matrix(0, 1, &[&[1.0], &[2.0], &[3.0]]);
        let r = mle_consensus_given_phi(&x, &phi).unwrap();
        let rw = r.weights.unwrap();
        for j in 0..3 {
            assert_relative_eq!(rw[j], w[j], epsilon = 1e-12);
        }
        assert!(rw[0] < rw[2] && rw[1] < rw[2]);
        assert!(rw[0] + rw[1] < 2.0 / 3.0);
        assert_relative_eq!(rw.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn phi_estimate_single_round() {
        // y = 0, columns [1], [-1], K = 1 -> Phi = [[1,-1],[-1,1]] + jitter I.
        let x = matrix(0, 1, &[&[1.0], &[-1.0]]);
        let y = vec![DVector::from_vec(vec![0.0])];
        let (model, missing) = mle_phi_given_consensus(&[x], &y).unwrap();
        assert!(missing.is_empty());
        let j = model.jitter();
        assert!(j > 0.0, "rank-one estimate requires jitter");
        let phi = model.phi();
        assert_relative_eq!(phi[(0, 0)] - j, 1.0, epsilon = 1e-12);
        assert_relative_eq!(phi[(0, 1)], -1.0, epsilon = 1e-12);
        assert_relative_eq!(phi[(1, 1)] - j, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn phi_estimate_zero_residuals_is_jittered_identity() {
        let x = matrix(0, 1, &[&[2.0], &[2.0]]);
        let y = vec![DVector::from_vec(vec![2.0])];
        let (model, _) = mle_phi_given_consensus(&[x], &y).unwrap();
        let phi = model.phi();
        assert_relative_eq!(phi[(0, 0)], 1e-9, epsilon = 1e-15);
        assert_relative_eq!(phi[(0, 1)], 0.0);
        assert_eq!(model.jitter(), 1e-9);
    }

    #[test]
    fn phi_estimate_monte_carlo_recovery() {
        // Planted covariance with strong off-diagonals; many synthetic rounds
        // recover it within 5% Frobenius.
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let planted = DMatrix::from_row_slice(3, 3, &[2.0, 1.2, 0.3, 1.2, 1.5, 0.9, 0.3, 0.9, 2.5]);
        let chol = Cholesky::new(planted.clone()).unwrap();
        let l = chol.l();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut rounds = Vec::new();
        let mut consensuses = Vec::new();
        for i in 0..10_000u64 {
            let z = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let noise = &l * z;
            let cols: Vec<DVector<f64>> =
                (0..3).map(|j| DVector::from_vec(vec![noise[j]])).collect();
            rounds.push(UpdateMatrix::from_columns(i, ids(&[0, 1, 2]), &cols).unwrap());
            consensuses.push(DVector::from_vec(vec![0.0]));
        }
        let (model, _) = mle_phi_given_consensus(&rounds, &consensuses).unwrap();
        let err = (model.phi() - &planted).norm() / planted.norm();
        assert!(err < 0.05, "relative Frobenius error {err}");
    }

    #[test]
    fn phi_estimate_requires_co_occurrence() {
        // Two parties never in the same round.
        let a = matrix(0, 1, &[&[1.0]]);
        let b = UpdateMatrix::new(1, ids(&[1]), DMatrix::from_row_slice(1, 1, &[2.0])).unwrap();
        let ys = vec![
            DVector::from_vec(vec![0.0]),
            DVector::from_vec(vec![0.0]),
        ];
        assert!(matches!(
            mle_phi_given_consensus(&[a, b], &ys),
            Err(AggError::DegenerateEstimate)
        ));
    }

    #[test]
    fn overlap_phi_matches_closed_form() {
        let spec = OverlapSpec::new(
            ids(&[0, 1]),
            vec![4, 6],
            vec![vec![4, 2], vec![2, 6]],
            1.0,
        )
        .unwrap();
        let model = overlap_phi(&spec).unwrap();
        assert_relative_eq!(model.phi()[(0, 1)], 1.0 / 12.0, epsilon = 1e-15);
        assert_relative_eq!(model.phi()[(0, 0)], 0.25, epsilon = 1e-15);
        assert_relative_eq!(model.phi()[(1, 1)], 1.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn overlap_phi_disjoint_and_identical_limits() {
        let disjoint = OverlapSpec::new(
            ids(&[0, 1]),
            vec![3, 5],
            vec![vec![3, 0], vec![0, 5]],
            2.0,
        )
        .unwrap();
        let model = overlap_phi(&disjoint).unwrap();
        assert_eq!(model.phi()[(0, 1)], 0.0);

        // Full overlap: Phi_jj' = sigma^2/m equals the diagonal, which makes
        // the matrix singular, so construction adds diagonal jitter.
        let m = 7;
        let identical = OverlapSpec::new(
            ids(&[0, 1]),
            vec![m, m],
            vec![vec![m, m], vec![m, m]],
            1.0,
        )
        .unwrap();
        let model = overlap_phi(&identical).unwrap();
        assert_relative_eq!(model.phi()[(0, 1)], 1.0 / m as f64, epsilon = 1e-15);
        assert!(model.jitter() > 0.0);
        assert_relative_eq!(
            model.phi()[(0, 0)] - model.jitter(),
            model.phi()[(0, 1)],
            epsilon = 1e-15
        );
    }

    #[test]
    fn overlap_spec_validation() {
        assert!(OverlapSpec::new(ids(&[0]), vec![0], vec![vec![0]], 1.0).is_err());
        assert!(OverlapSpec::new(
            ids(&[0, 1]),
            vec![2, 2],
            vec![vec![2, 3], vec![3, 2]],
            1.0
        )
        .is_err());
        assert!(OverlapSpec::new(
            ids(&[0, 1]),
            vec![2, 2],
            vec![vec![2, 1], vec![0, 2]],
            1.0
        )
        .is_err());
    }

    #[test]
    fn consensus_stationarity_identity() {
        // 1^T Phi^-1 (x - y 1) = 0 for every coordinate.
        let x = matrix(0, 3, &[&[1.0, 0.5, -2.0], &[4.0, 1.0, 0.0], &[2.0, -3.0, 1.0]]);
        let phi = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.3, 0.1, 0.3, 1.5]);
        let r = mle_consensus_given_phi(&x, &phi).unwrap();
        let inv = phi.try_inverse().unwrap();
        let ones = DVector::from_element(3, 1.0);
        for k in 0..3 {
            let row = DVector::from_fn(3, |j, _| x.values()[(k, j)] - r.consensus[k]);
            let stat = ones.dot(&(&inv * row));
            assert!(stat.abs() < 1e-10, "stationarity violated: {stat}");
        }
    }
}
