//! Python bindings: the observation types, the baseline and Bayesian
//! aggregators, and a one-call config runner.

use fedbayes::harness::{self, run_suite};
use fedbayes::icov::{self, IcovMleParams, IcovVbParams, IcovVbState, OverlapSpec};
use fedbayes::ivar::{self, IvarMleParams, IvarState, IvarVbParams, IvarVbState};
use fedbayes::update::{AggregateResult, PartyId};
use fedbayes::{baseline, AggregatorKind};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use std::path::PathBuf;

fn agg_err(e: fedbayes::AggError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// One round of party updates: column j holds party_ids[j]'s update vector.
#[pyclass(name = "UpdateMatrix", frozen)]
struct PyUpdateMatrix {
    inner: fedbayes::UpdateMatrix,
}

#[pymethods]
impl PyUpdateMatrix {
    /// Build from per-party columns: columns[j] is party j's update vector.
    #[new]
    fn new(round_id: u64, party_ids: Vec<u32>, columns: Vec<Vec<f64>>) -> PyResult<Self> {
        let ids: Vec<PartyId> = party_ids.into_iter().map(PartyId).collect();
        let cols: Vec<nalgebra::DVector<f64>> = columns
            .into_iter()
            .map(nalgebra::DVector::from_vec)
            .collect();
        let inner = fedbayes::UpdateMatrix::from_columns(round_id, ids, &cols).map_err(agg_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn round_id(&self) -> u64 {
        self.inner.round_id()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn party_ids(&self) -> Vec<u32> {
        self.inner.party_ids().iter().map(|p| p.0).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "UpdateMatrix(round_id={}, K={}, parties={})",
            self.inner.round_id(),
            self.inner.dim(),
            self.inner.party_count()
        )
    }
}

/// Consensus vector plus diagnostics.
#[pyclass(name = "AggregateResult", frozen)]
struct PyAggregateResult {
    #[pyo3(get)]
    consensus: Vec<f64>,
    #[pyo3(get)]
    weights: Option<Vec<f64>>,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    objective_trace: Option<Vec<f64>>,
    #[pyo3(get)]
    posterior_var: Option<f64>,
}

impl From<AggregateResult> for PyAggregateResult {
    fn from(r: AggregateResult) -> Self {
        Self {
            consensus: r.consensus.iter().copied().collect(),
            weights: r.weights,
            iterations: r.iterations,
            objective_trace: r.objective_trace,
            posterior_var: r.posterior_var,
        }
    }
}

#[pymethods]
impl PyAggregateResult {
    fn __repr__(&self) -> String {
        format!(
            "AggregateResult(consensus={:?}, iterations={})",
            self.consensus, self.iterations
        )
    }
}

/// Weighted mean of the update columns.
#[pyfunction]
fn weighted_average(x: &PyUpdateMatrix, weights: Vec<f64>) -> PyResult<PyAggregateResult> {
    baseline::weighted_average(&x.inner, &weights)
        .map(Into::into)
        .map_err(agg_err)
}

/// Coordinate-wise median of the update columns.
#[pyfunction]
fn coordinate_median(x: &PyUpdateMatrix) -> PyAggregateResult {
    baseline::coordinate_median(&x.inner).into()
}

/// Smoothed-Weiszfeld geometric median.
#[pyfunction]
#[pyo3(signature = (x, smoothing=1e-6, tol=1e-8, max_iter=100))]
fn geometric_median(
    x: &PyUpdateMatrix,
    smoothing: f64,
    tol: f64,
    max_iter: usize,
) -> PyResult<PyAggregateResult> {
    baseline::geometric_median(&x.inner, smoothing, tol, max_iter)
        .map(Into::into)
        .map_err(agg_err)
}

/// Inverse-variance MLE over one or more rounds; returns one result per
/// round.
#[pyfunction]
#[pyo3(signature = (rounds, iters=100, tol=1e-8, floor=1e-8, window=10))]
fn ivar_mle(
    rounds: Vec<PyRef<PyUpdateMatrix>>,
    iters: usize,
    tol: f64,
    floor: f64,
    window: usize,
) -> PyResult<Vec<PyAggregateResult>> {
    let rounds: Vec<fedbayes::UpdateMatrix> = rounds.iter().map(|r| r.inner.clone()).collect();
    let mut state = IvarState::new(window);
    let params = IvarMleParams {
        iters,
        tol,
        floor,
        robust_start: false,
    };
    ivar::ivar_mle_aggregate(&rounds, &mut state, &params)
        .map(|rs| rs.into_iter().map(Into::into).collect())
        .map_err(agg_err)
}

/// Independent-noise variational-Bayes aggregation.
#[pyfunction]
#[pyo3(signature = (rounds, iters=100, tol=1e-8, tau_sq=1.0, window=10))]
fn ivar_vb(
    rounds: Vec<PyRef<PyUpdateMatrix>>,
    iters: usize,
    tol: f64,
    tau_sq: f64,
    window: usize,
) -> PyResult<Vec<PyAggregateResult>> {
    let rounds: Vec<fedbayes::UpdateMatrix> = rounds.iter().map(|r| r.inner.clone()).collect();
    let mut state = IvarVbState::with_prior(window, tau_sq);
    let params = IvarVbParams {
        iters,
        tol,
        freeze_hyperparams: false,
    };
    ivar::ivar_vb_aggregate(&rounds, &mut state, &params)
        .map(|rs| rs.into_iter().map(Into::into).collect())
        .map_err(agg_err)
}

/// Latent-noise variational-Bayes aggregation.
#[pyfunction]
#[pyo3(signature = (rounds, latent_dim=2, iters=100, tol=1e-8, seed=0, window=10))]
fn icov_vb(
    rounds: Vec<PyRef<PyUpdateMatrix>>,
    latent_dim: usize,
    iters: usize,
    tol: f64,
    seed: u64,
    window: usize,
) -> PyResult<Vec<PyAggregateResult>> {
    let rounds: Vec<fedbayes::UpdateMatrix> = rounds.iter().map(|r| r.inner.clone()).collect();
    let mut state = IcovVbState::new(latent_dim, window, seed);
    let params = IcovVbParams {
        latent_dim,
        iters,
        tol,
        ..IcovVbParams::default()
    };
    icov::icov_vb_aggregate(&rounds, &mut state, &params)
        .map(|rs| rs.into_iter().map(Into::into).collect())
        .map_err(agg_err)
}

/// Latent-factor covariance MLE; returns (phi, consensuses).
#[pyfunction]
#[pyo3(signature = (rounds, latent_dim=2, lr=1e-3, epochs=200, seed=0))]
fn icov_mle(
    rounds: Vec<PyRef<PyUpdateMatrix>>,
    latent_dim: usize,
    lr: f64,
    epochs: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<PyAggregateResult>)> {
    let rounds: Vec<fedbayes::UpdateMatrix> = rounds.iter().map(|r| r.inner.clone()).collect();
    let params = IcovMleParams {
        latent_dim,
        lr,
        epochs,
        ..IcovMleParams::default()
    };
    let (model, results) = icov::icov_mle_fit(&rounds, &params, seed).map_err(agg_err)?;
    Ok((
        matrix_rows(model.phi()),
        results.into_iter().map(Into::into).collect(),
    ))
}

/// Overlap-induced covariance matrix from sample sizes and pairwise overlap
/// counts.
#[pyfunction]
fn overlap_phi(
    party_ids: Vec<u32>,
    sizes: Vec<usize>,
    overlaps: Vec<Vec<usize>>,
    sigma_sq: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let ids = party_ids.into_iter().map(PartyId).collect();
    let spec = OverlapSpec::new(ids, sizes, overlaps, sigma_sq).map_err(agg_err)?;
    let model = icov::overlap_phi(&spec).map_err(agg_err)?;
    Ok(matrix_rows(model.phi()))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

/// Parse, validate, and run a TOML experiment config; writes the report
/// files and returns the per-aggregator summary.
#[pyfunction]
#[pyo3(signature = (config_text, out_dir=None, aggregators=None, jobs=1))]
fn run_config(
    py: Python<'_>,
    config_text: &str,
    out_dir: Option<PathBuf>,
    aggregators: Option<Vec<String>>,
    jobs: usize,
) -> PyResult<Py<pyo3::types::PyDict>> {
    let cfg = harness::parse_config(config_text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let kinds: Vec<AggregatorKind> = match aggregators {
        None => vec![cfg.aggregator.clone()],
        Some(names) => names
            .iter()
            .map(|n| {
                AggregatorKind::from_name(n)
                    .ok_or_else(|| PyValueError::new_err(format!("unknown aggregator {n}")))
            })
            .collect::<PyResult<_>>()?,
    };
    let summary = run_suite(&cfg, &kinds, jobs.max(1));
    if let Some(dir) = out_dir.or_else(|| cfg.run.out_dir.clone()) {
        harness::emit_reports(&summary, &dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    }

    let dict = pyo3::types::PyDict::new(py);
    let runs = pyo3::types::PyList::empty(py);
    for r in &summary.records {
        let row = pyo3::types::PyDict::new(py);
        row.set_item("aggregator", &r.aggregator)?;
        row.set_item("seed", r.seed)?;
        row.set_item("final_metric", r.final_metric)?;
        row.set_item("error", r.error.as_deref())?;
        runs.append(row)?;
    }
    dict.set_item("runs", runs)?;
    let stats = pyo3::types::PyList::empty(py);
    for s in &summary.stats {
        let row = pyo3::types::PyDict::new(py);
        row.set_item("aggregator", &s.aggregator)?;
        row.set_item("mean", s.mean)?;
        row.set_item("std", s.std)?;
        row.set_item("n", s.n)?;
        stats.append(row)?;
    }
    dict.set_item("summary", stats)?;
    Ok(dict.unbind())
}

#[pymodule]
fn fedbayes_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyUpdateMatrix>()?;
    m.add_class::<PyAggregateResult>()?;
    m.add_function(wrap_pyfunction!(weighted_average, m)?)?;
    m.add_function(wrap_pyfunction!(coordinate_median, m)?)?;
    m.add_function(wrap_pyfunction!(geometric_median, m)?)?;
    m.add_function(wrap_pyfunction!(ivar_mle, m)?)?;
    m.add_function(wrap_pyfunction!(ivar_vb, m)?)?;
    m.add_function(wrap_pyfunction!(icov_vb, m)?)?;
    m.add_function(wrap_pyfunction!(icov_mle, m)?)?;
    m.add_function(wrap_pyfunction!(overlap_phi, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
