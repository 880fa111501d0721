//! Aggregator selection and uniform dispatch, so callers can drive any
//! method through one interface while the method-specific state is carried
//! across rounds.

use crate::baseline;
use crate::error::{AggError, Result};
use crate::icov::{self, IcovMleParams, IcovVbParams, IcovVbState};
use crate::ivar::{self, IvarMleParams, IvarState, IvarVbParams, IvarVbState};
use crate::update::{AggregateResult, PartyId, UpdateMatrix};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Smoothed-Weiszfeld hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeomMedianParams {
    pub smoothing: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GeomMedianParams {
    fn default() -> Self {
        Self {
            smoothing: 1e-6,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

/// The aggregation method together with its hyperparameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregatorKind {
    /// Plain or sample-size-weighted averaging.
    UniformAvg {
        /// Optional per-party weights (e.g. sample sizes); missing parties
        /// weigh 1.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sample_weights: Option<Vec<(PartyId, f64)>>,
    },
    CoordMedian,
    GeomMedian {
        #[serde(flatten)]
        params: GeomMedianParams,
    },
    IvarMle {
        #[serde(flatten)]
        params: IvarMleHyper,
    },
    IvarVb {
        #[serde(flatten)]
        params: IvarVbHyper,
    },
    IcovMle {
        #[serde(flatten)]
        params: IcovMleHyper,
    },
    IcovVb {
        #[serde(flatten)]
        params: IcovVbHyper,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IvarMleHyper {
    pub iters: usize,
    pub tol: f64,
    pub floor: f64,
    pub robust_start: bool,
}

impl Default for IvarMleHyper {
    fn default() -> Self {
        let p = IvarMleParams::default();
        // Streaming default: a few passes per round. Running the fixed
        // point to convergence on a single round collapses all weight onto
        // the tightest column (its residual reaches zero and the epsilon
        // floor then locks the window there); pooling variances across the
        // round window with a short per-round budget avoids that sink.
        Self {
            iters: 3,
            tol: p.tol,
            floor: p.floor,
            robust_start: p.robust_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IvarVbHyper {
    pub iters: usize,
    pub tol: f64,
    pub tau_sq_init: f64,
}

impl Default for IvarVbHyper {
    fn default() -> Self {
        Self {
            iters: 100,
            tol: 1e-8,
            tau_sq_init: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcovMleHyper {
    pub latent_dim: usize,
    pub lr: f64,
    /// Gradient sweeps per aggregation call.
    pub epochs: usize,
    pub init_scale: f64,
}

impl Default for IcovMleHyper {
    fn default() -> Self {
        let p = IcovMleParams::default();
        Self {
            latent_dim: p.latent_dim,
            lr: p.lr,
            epochs: 50,
            init_scale: p.init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcovVbHyper {
    pub latent_dim: usize,
    pub iters: usize,
    pub tol: f64,
    pub init_scale: f64,
    /// Estimate one noise variance per party instead of a shared sigma^2.
    pub per_party_noise: bool,
}

impl Default for IcovVbHyper {
    fn default() -> Self {
        let p = IcovVbParams::default();
        Self {
            latent_dim: p.latent_dim,
            iters: p.iters,
            tol: p.tol,
            init_scale: p.init_scale,
            per_party_noise: p.per_party_noise,
        }
    }
}

impl AggregatorKind {
    /// Stable identifier used in logs and report files.
    pub fn name(&self) -> &'static str {
        match self {
            AggregatorKind::UniformAvg { .. } => "uniform_avg",
            AggregatorKind::CoordMedian => "coord_median",
            AggregatorKind::GeomMedian { .. } => "geom_median",
            AggregatorKind::IvarMle { .. } => "ivar_mle",
            AggregatorKind::IvarVb { .. } => "ivar_vb",
            AggregatorKind::IcovMle { .. } => "icov_mle",
            AggregatorKind::IcovVb { .. } => "icov_vb",
        }
    }

    /// Default-configured aggregator for a stable identifier.
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "uniform_avg" => Some(AggregatorKind::UniformAvg {
                sample_weights: None,
            }),
            "coord_median" => Some(AggregatorKind::CoordMedian),
            "geom_median" => Some(AggregatorKind::GeomMedian {
                params: GeomMedianParams::default(),
            }),
            "ivar_mle" => Some(AggregatorKind::IvarMle {
                params: IvarMleHyper::default(),
            }),
            "ivar_vb" => Some(AggregatorKind::IvarVb {
                params: IvarVbHyper::default(),
            }),
            "icov_mle" => Some(AggregatorKind::IcovMle {
                params: IcovMleHyper::default(),
            }),
            "icov_vb" => Some(AggregatorKind::IcovVb {
                params: IcovVbHyper::default(),
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AggregatorKind::UniformAvg { sample_weights } => {
                if let Some(w) = sample_weights {
                    if w.iter().any(|(_, v)| !v.is_finite() || *v < 0.0) {
                        return Err(AggError::InvalidWeights(
                            "sample weights must be finite and nonnegative".into(),
                        ));
                    }
                }
                Ok(())
            }
            AggregatorKind::CoordMedian => Ok(()),
            AggregatorKind::GeomMedian { params } => {
                if !(params.smoothing > 0.0) {
                    return Err(AggError::InvalidHyper("smoothing must be > 0".into()));
                }
                if !(params.tol > 0.0) {
                    return Err(AggError::InvalidHyper("tol must be > 0".into()));
                }
                if params.max_iter == 0 {
                    return Err(AggError::InvalidHyper("max_iter must be >= 1".into()));
                }
                Ok(())
            }
            AggregatorKind::IvarMle { params } => {
                if params.iters == 0 {
                    return Err(AggError::InvalidHyper("iters must be >= 1".into()));
                }
                if !(params.tol > 0.0) {
                    return Err(AggError::InvalidHyper("tol must be > 0".into()));
                }
                if !(params.floor > 0.0) {
                    return Err(AggError::InvalidHyper("floor must be > 0".into()));
                }
                Ok(())
            }
            AggregatorKind::IvarVb { params } => {
                if params.iters == 0 {
                    return Err(AggError::InvalidHyper("iters must be >= 1".into()));
                }
                if !(params.tol > 0.0) {
                    return Err(AggError::InvalidHyper("tol must be > 0".into()));
                }
                if !(params.tau_sq_init > 0.0) {
                    return Err(AggError::InvalidHyper("tau_sq_init must be > 0".into()));
                }
                Ok(())
            }
            AggregatorKind::IcovMle { params } => {
                if params.latent_dim == 0 {
                    return Err(AggError::InvalidHyper("latent_dim must be >= 1".into()));
                }
                if !(params.lr > 0.0) {
                    return Err(AggError::InvalidHyper("lr must be > 0".into()));
                }
                if params.epochs == 0 {
                    return Err(AggError::InvalidHyper("epochs must be >= 1".into()));
                }
                Ok(())
            }
            AggregatorKind::IcovVb { params } => {
                if params.latent_dim == 0 {
                    return Err(AggError::InvalidHyper("latent_dim must be >= 1".into()));
                }
                if params.iters == 0 {
                    return Err(AggError::InvalidHyper("iters must be >= 1".into()));
                }
                if !(params.tol > 0.0) {
                    return Err(AggError::InvalidHyper("tol must be > 0".into()));
                }
                Ok(())
            }
        }
    }
}

/// Cross-round estimator state matching one aggregator kind. Baselines are
/// stateless; the Bayesian methods carry their noise estimates, and the
/// latent-factor MLE keeps a raw window of past rounds to refit against.
#[derive(Debug, Clone)]
pub enum NoiseState {
    Stateless,
    Ivar(IvarState),
    IvarVb(IvarVbState),
    IcovMle {
        window: VecDeque<UpdateMatrix>,
        window_len: usize,
        seed: u64,
    },
    IcovVb(IcovVbState),
}

impl NoiseState {
    /// Fresh state for the given aggregator. The seed feeds latent-feature
    /// initialization only; baselines and IVAR ignore it.
    pub fn for_kind(kind: &AggregatorKind, window: usize, seed: u64) -> Self {
        match kind {
            AggregatorKind::UniformAvg { .. }
            | AggregatorKind::CoordMedian
            | AggregatorKind::GeomMedian { .. } => NoiseState::Stateless,
            AggregatorKind::IvarMle { .. } => NoiseState::Ivar(IvarState::new(window)),
            AggregatorKind::IvarVb { params } => {
                NoiseState::IvarVb(IvarVbState::with_prior(window, params.tau_sq_init))
            }
            AggregatorKind::IcovMle { .. } => NoiseState::IcovMle {
                window: VecDeque::new(),
                window_len: window.max(1),
                seed,
            },
            AggregatorKind::IcovVb { params } => {
                NoiseState::IcovVb(IcovVbState::new(params.latent_dim, window, seed))
            }
        }
    }
}

/// Route one round through the named aggregator, updating the carried state.
/// Baselines leave the state untouched.
pub fn aggregate(
    kind: &AggregatorKind,
    x: &UpdateMatrix,
    state: &mut NoiseState,
) -> Result<AggregateResult> {
    kind.validate()?;
    match (kind, state) {
        (AggregatorKind::UniformAvg { sample_weights }, _) => {
            let weights: Vec<f64> = x
                .party_ids()
                .iter()
                .map(|p| {
                    sample_weights
                        .as_ref()
                        .and_then(|w| w.iter().find(|(q, _)| q == p))
                        .map(|(_, v)| *v)
                        .unwrap_or(1.0)
                })
                .collect();
            baseline::weighted_average(x, &weights)
        }
        (AggregatorKind::CoordMedian, _) => Ok(baseline::coordinate_median(x)),
        (AggregatorKind::GeomMedian { params }, _) => {
            baseline::geometric_median(x, params.smoothing, params.tol, params.max_iter)
        }
        (AggregatorKind::IvarMle { params }, NoiseState::Ivar(st)) => {
            let p = IvarMleParams {
                iters: params.iters,
                tol: params.tol,
                floor: params.floor,
                robust_start: params.robust_start,
            };
            let mut results = ivar::ivar_mle_aggregate(std::slice::from_ref(x), st, &p)?;
            Ok(results.remove(0))
        }
        (AggregatorKind::IvarVb { params }, NoiseState::IvarVb(st)) => {
            let p = IvarVbParams {
                iters: params.iters,
                tol: params.tol,
                freeze_hyperparams: false,
            };
            let mut results = ivar::ivar_vb_aggregate(std::slice::from_ref(x), st, &p)?;
            Ok(results.remove(0))
        }
        (
            AggregatorKind::IcovMle { params },
            NoiseState::IcovMle {
                window,
                window_len,
                seed,
            },
        ) => {
            window.push_back(x.clone());
            while window.len() > *window_len {
                window.pop_front();
            }
            let p = IcovMleParams {
                latent_dim: params.latent_dim,
                lr: params.lr,
                epochs: params.epochs,
                init_scale: params.init_scale,
            };
            let rounds: Vec<UpdateMatrix> = window.iter().cloned().collect();
            let (_, mut results) = icov::icov_mle_fit(&rounds, &p, *seed)?;
            Ok(results.remove(results.len() - 1))
        }
        (AggregatorKind::IcovVb { params }, NoiseState::IcovVb(st)) => {
            let p = IcovVbParams {
                latent_dim: params.latent_dim,
                iters: params.iters,
                tol: params.tol,
                init_scale: params.init_scale,
                per_party_noise: params.per_party_noise,
                ..IcovVbParams::default()
            };
            let mut results = icov::icov_vb_aggregate(std::slice::from_ref(x), st, &p)?;
            Ok(results.remove(0))
        }
        _ => Err(AggError::InvalidSpec(
            "noise state does not match the aggregator kind".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn matrix(round: u64, k: usize, cols: &[&[f64]]) -> UpdateMatrix {
        let ids = (0..cols.len() as u32).map(PartyId).collect();
        let values = DMatrix::from_fn(k, cols.len(), |r, c| cols[c][r]);
        UpdateMatrix::new(round, ids, values).unwrap()
    }

    #[test]
    fn uniform_avg_identical_columns() {
        let c = [1.5, -2.0];
        let x = matrix(0, 2, &[&c, &c]);
        let kind = AggregatorKind::UniformAvg {
            sample_weights: None,
        };
        let mut state = NoiseState::for_kind(&kind, 10, 0);
        let r = aggregate(&kind, &x, &mut state).unwrap();
        assert_relative_eq!(r.consensus[0], 1.5);
        assert_relative_eq!(r.consensus[1], -2.0);
    }

    #[test]
    fn dispatch_is_transparent_for_coord_median() {
        let x = matrix(0, 2, &[&[1.0, 5.0], &[2.0, 6.0], &[9.0, 7.0]]);
        let kind = AggregatorKind::CoordMedian;
        let mut state = NoiseState::for_kind(&kind, 10, 0);
        let via_dispatch = aggregate(&kind, &x, &mut state).unwrap();
        let direct = baseline::coordinate_median(&x);
        assert_eq!(via_dispatch.consensus, direct.consensus);
    }

    #[test]
    fn ivar_mle_pulls_toward_majority() {
        let x = matrix(0, 1, &[&[0.0], &[0.0], &[9.0]]);
        let kind = AggregatorKind::IvarMle {
            params: IvarMleHyper::default(),
        };
        let mut state = NoiseState::for_kind(&kind, 10, 0);
        let r = aggregate(&kind, &x, &mut state).unwrap();
        assert!(
            r.consensus[0] < 3.0 && r.consensus[0] >= 0.0,
            "consensus {}",
            r.consensus[0]
        );
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let x = matrix(0, 1, &[&[0.0], &[1.0]]);
        let kind = AggregatorKind::IvarMle {
            params: IvarMleHyper::default(),
        };
        let mut state = NoiseState::Stateless;
        assert!(aggregate(&kind, &x, &mut state).is_err());
    }

    #[test]
    fn kind_validation_rejects_bad_hyperparameters() {
        let bad = AggregatorKind::GeomMedian {
            params: GeomMedianParams {
                smoothing: 0.0,
                ..GeomMedianParams::default()
            },
        };
        assert!(bad.validate().is_err());
        let bad = AggregatorKind::IcovVb {
            params: IcovVbHyper {
                latent_dim: 0,
                ..IcovVbHyper::default()
            },
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn names_round_trip() {
        for name in [
            "uniform_avg",
            "coord_median",
            "geom_median",
            "ivar_mle",
            "ivar_vb",
            "icov_mle",
            "icov_vb",
        ] {
            let kind = AggregatorKind::from_name(name).unwrap();
            assert_eq!(kind.name(), name);
        }
        assert!(AggregatorKind::from_name("krum").is_none());
    }
}
