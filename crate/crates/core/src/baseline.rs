//! Baseline aggregators: weighted mean, coordinate-wise median, and the
//! smoothed-Weiszfeld geometric median.

use crate::error::{AggError, Result};
use crate::update::{AggregateResult, UpdateMatrix};
use nalgebra::DVector;

/// Weighted mean of the update columns.
///
/// With per-party sample sizes as weights this is the standard federated
/// averaging rule; with equal weights it is the arithmetic mean.
pub fn weighted_average(x: &UpdateMatrix, weights: &[f64]) -> Result<AggregateResult> {
    if weights.len() != x.party_count() {
        return Err(AggError::ShapeMismatch {
            expected: x.party_count(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(AggError::InvalidWeights(
            "weights must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(AggError::InvalidWeights("all weights are zero".into()));
    }
    let mut consensus = DVector::zeros(x.dim());
    for (j, &w) in weights.iter().enumerate() {
        consensus.axpy(w / total, &x.column(j), 1.0);
    }
    let normalized = weights.iter().map(|w| w / total).collect();
    Ok(AggregateResult::closed_form(consensus, Some(normalized)))
}

/// Coordinate-wise median of the update columns.
///
/// For an even number of parties each coordinate takes the midpoint of the
/// two central order statistics.
pub fn coordinate_median(x: &UpdateMatrix) -> AggregateResult {
    let n = x.party_count();
    let mut consensus = DVector::zeros(x.dim());
    let mut row = vec![0.0; n];
    for k in 0..x.dim() {
        for j in 0..n {
            row[j] = x.values()[(k, j)];
        }
        row.sort_by(|a, b| a.partial_cmp(b).unwrap());
        consensus[k] = if n % 2 == 1 {
            row[n / 2]
        } else {
            0.5 * (row[n / 2 - 1] + row[n / 2])
        };
    }
    AggregateResult {
        consensus,
        weights: None,
        iterations: 1,
        objective_trace: None,
        posterior_var: None,
    }
}

/// Smoothed objective sum_j max(||x_j - y||, smoothing).
fn smoothed_objective(x: &UpdateMatrix, y: &DVector<f64>, smoothing: f64) -> f64 {
    (0..x.party_count())
        .map(|j| (x.column(j) - y).norm().max(smoothing))
        .sum()
}

/// Geometric median via the smoothed Weiszfeld iteration, started from the
/// coordinate-wise median.
pub fn geometric_median(
    x: &UpdateMatrix,
    smoothing: f64,
    tol: f64,
    max_iter: usize,
) -> Result<AggregateResult> {
    if smoothing <= 0.0 {
        return Err(AggError::InvalidHyper("smoothing must be > 0".into()));
    }
    if tol <= 0.0 {
        return Err(AggError::InvalidHyper("tol must be > 0".into()));
    }
    let mut y = coordinate_median(x).consensus;
    let mut trace = vec![smoothed_objective(x, &y, smoothing)];
    let mut iterations = 0;
    for t in 0..max_iter {
        let mut numer = DVector::zeros(x.dim());
        let mut denom = 0.0;
        for j in 0..x.party_count() {
            let col = x.column(j);
            let w = 1.0 / (&col - &y).norm().max(smoothing);
            numer.axpy(w, &col, 1.0);
            denom += w;
        }
        let next = numer / denom;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(AggError::Numerical { iteration: t });
        }
        let step = (&next - &y).norm();
        let y_norm = y.norm();
        y = next;
        iterations = t + 1;
        trace.push(smoothed_objective(x, &y, smoothing));
        if step <= tol * (1.0 + y_norm) {
            break;
        }
    }
    Ok(AggregateResult {
        consensus: y,
        weights: None,
        iterations,
        objective_trace: Some(trace),
        posterior_var: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::update::PartyId;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn matrix(round: u64, k: usize, cols: &[&[f64]]) -> UpdateMatrix {
        let ids = (0..cols.len() as u32).map(PartyId).collect();
        let values = DMatrix::from_fn(k, cols.len(), |r, c| cols[c][r]);
        UpdateMatrix::new(round, ids, values).unwrap()
    }

    #[test]
    fn weighted_average_basic() {
        // columns [0], [4] with weights [1, 3] -> 3
        let x = matrix(0, 1, &[&[0.0], &[4.0]]);
        let r = weighted_average(&x, &[1.0, 3.0]).unwrap();
        assert_relative_eq!(r.consensus[0], 3.0);
        assert_eq!(r.weights.unwrap(), vec![0.25, 0.75]);
    }

    #[test]
    fn weighted_average_equal_weights_is_mean() {
        let x = matrix(0, 2, &[&[1.0, -2.0], &[3.0, 6.0], &[5.0, 2.0]]);
        let r = weighted_average(&x, &[2.0, 2.0, 2.0]).unwrap();
        assert_relative_eq!(r.consensus[0], 3.0, epsilon = 1e-12);
        assert_relative_eq!(r.consensus[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn weighted_average_single_party_identity() {
        let x = matrix(0, 2, &[&[7.0, -1.0]]);
        let r = weighted_average(&x, &[5.0]).unwrap();
        assert_eq!(r.consensus, x.column(0));
        assert_eq!(r.weights.unwrap(), vec![1.0]);
    }

    #[test]
    fn weighted_average_rejects_zero_and_mismatch() {
        let x = matrix(0, 1, &[&[0.0], &[4.0]]);
        assert!(matches!(
            weighted_average(&x, &[0.0, 0.0]),
            Err(AggError::InvalidWeights(_))
        ));
        assert!(matches!(
            weighted_average(&x, &[1.0]),
            Err(AggError::ShapeMismatch { .. })
        ));
        assert!(weighted_average(&x, &[1.0, -0.5]).is_err());
    }

    #[test]
    fn coordinate_median_odd() {
        let x = matrix(0, 2, &[&[1.0, 5.0], &[2.0, 6.0], &[9.0, 7.0]]);
        let r = coordinate_median(&x);
        assert_eq!(r.consensus, DVector::from_vec(vec![2.0, 6.0]));
        assert!(r.weights.is_none());
    }

    #[test]
    fn coordinate_median_even_midpoint() {
        let x = matrix(0, 1, &[&[0.0], &[4.0]]);
        assert_eq!(coordinate_median(&x).consensus[0], 2.0);
    }

    #[test]
    fn coordinate_median_single_column() {
        let x = matrix(0, 3, &[&[1.0, -2.0, 0.5]]);
        assert_eq!(coordinate_median(&x).consensus, x.column(0));
    }

    #[test]
    fn geometric_median_collinear_is_median() {
        let x = matrix(0, 1, &[&[0.0], &[1.0], &[10.0]]);
        let r = geometric_median(&x, 1e-6, 1e-8, 100).unwrap();
        assert_relative_eq!(r.consensus[0], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn geometric_median_identical_columns_fixed_point() {
        let c = [2.5, -1.0];
        let x = matrix(0, 2, &[&c, &c, &c]);
        let r = geometric_median(&x, 1e-6, 1e-8, 100).unwrap();
        assert_relative_eq!(r.consensus[0], 2.5, epsilon = 1e-9);
        assert_relative_eq!(r.consensus[1], -1.0, epsilon = 1e-9);
        assert_eq!(r.iterations, 1);
    }

    // Oracle: coarse-to-fine grid search over the square minimizing the sum
    // of Euclidean distances to the four corners.
    fn grid_search_median(corners: &[[f64; 2]; 4]) -> [f64; 2] {
        let objective = |p: [f64; 2]| -> f64 {
            corners
                .iter()
                .map(|c| ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2)).sqrt())
                .sum()
        };
        let (mut cx, mut cy, mut half) = (0.5, 0.5, 0.5);
        let mut best = [cx, cy];
        for _ in 0..20 {
            let mut best_val = f64::INFINITY;
            for ix in -10..=10 {
                for iy in -10..=10 {
                    let p = [cx + ix as f64 * half / 10.0, cy + iy as f64 * half / 10.0];
                    let v = objective(p);
                    if v < best_val {
                        best_val = v;
                        best = p;
                    }
                }
            }
            cx = best[0];
            cy = best[1];
            half /= 5.0;
        }
        best
    }

    #[test]
    fn geometric_median_square_corners_is_centroid() {
        let corners = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let oracle = grid_search_median(&corners);
        assert_relative_eq!(oracle[0], 0.5, epsilon = 1e-4);
        assert_relative_eq!(oracle[1], 0.5, epsilon = 1e-4);

        let x = matrix(
            0,
            2,
            &[&corners[0], &corners[1], &corners[2], &corners[3]],
        );
        let r = geometric_median(&x, 1e-6, 1e-8, 100).unwrap();
        assert_relative_eq!(r.consensus[0], oracle[0], epsilon = 1e-4);
        assert_relative_eq!(r.consensus[1], oracle[1], epsilon = 1e-4);
    }

    #[test]
    fn geometric_median_objective_non_increasing() {
        let x = matrix(
            0,
            3,
            &[
                &[0.0, 1.0, -3.0],
                &[5.0, 2.0, 0.0],
                &[1.0, -4.0, 2.0],
                &[8.0, 8.0, 8.0],
            ],
        );
        let r = geometric_median(&x, 1e-6, 1e-10, 200).unwrap();
        let trace = r.objective_trace.unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective increased: {w:?}");
        }
    }
}
