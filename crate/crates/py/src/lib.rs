//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::Path;

use cgt_core::algo::{self, AlgoConfig, Algorithm, ClipThreshold};
use cgt_core::experiment::{self, ExperimentConfig, ExperimentError, ProbeSettings};
use cgt_core::graph::{self, Edge, GraphSpec, Matrix, Vector};
use cgt_core::metrics::{TrajectoryRecord, VecRecorder};
use cgt_core::objective::LocalObjective;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn experiment_err(e: ExperimentError) -> PyErr {
    match e {
        ExperimentError::Config { .. } => PyValueError::new_err(e.to_string()),
        ExperimentError::Io { .. } => PyIOError::new_err(e.to_string()),
        ExperimentError::Numerical(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Matrix::from_shape_vec((n, d), rows.concat()).map_err(value_err)
}

fn algorithm(name: &str) -> PyResult<Algorithm> {
    match name {
        "cgt" => Ok(Algorithm::Cgt),
        "gt" => Ok(Algorithm::Gt),
        "dgd_clip" => Ok(Algorithm::DgdClip),
        other => Err(PyValueError::new_err(format!("unknown algorithm {other:?}"))),
    }
}

fn record_dict<'py>(py: Python<'py>, r: &TrajectoryRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("k", r.k)?;
    d.set_item("loss_avg", r.loss_avg)?;
    d.set_item("grad_norm_avg", r.grad_norm_avg)?;
    d.set_item("consensus_err_sq", r.consensus_err_sq)?;
    d.set_item("tracking_err_sq", r.tracking_err_sq)?;
    d.set_item("max_local_step", r.max_local_step)?;
    d.set_item("min_grad_so_far", r.min_grad_so_far)?;
    if !r.mean_local_loss.is_nan() {
        d.set_item("mean_local_loss", r.mean_local_loss)?;
    }
    Ok(d)
}

/// Row-stochastic `R` and column-stochastic `C` built from a graph.
#[pyclass(name = "MixingPair", frozen)]
struct PyMixingPair {
    inner: graph::MixingPair,
}

#[pymethods]
impl PyMixingPair {
    /// `kind` is "ring", "random" or "explicit"; explicit edges are
    /// `(from, to, weight)` triples numbered from 1.
    #[new]
    #[pyo3(signature = (kind, n_agents, density = 0.5, seed = 0, edges = None))]
    fn new(kind: &str, n_agents: usize, density: f64, seed: u64, edges: Option<Vec<(usize, usize, f64)>>) -> PyResult<Self> {
        let spec = match kind {
            "ring" | "directed_ring" => GraphSpec::ring(n_agents),
            "random" | "random_strongly_connected" => GraphSpec::random(n_agents, density, seed),
            "explicit" => {
                let edges = edges.ok_or_else(|| PyValueError::new_err("explicit graphs need edges"))?;
                GraphSpec::explicit(n_agents, edges.into_iter().map(|(f, t, w)| Edge(f, t, w)).collect())
            }
            other => return Err(PyValueError::new_err(format!("unknown graph kind {other:?}"))),
        };
        Ok(Self {
            inner: graph::build_mixing_pair(&spec).map_err(value_err)?,
        })
    }

    /// Validates and wraps user-supplied matrices.
    #[staticmethod]
    fn from_matrices(r: Vec<Vec<f64>>, c: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: graph::MixingPair::from_matrices(matrix(&r)?, matrix(&c)?).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: graph::MixingPair::from_text(text).map_err(value_err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.inner.n_agents()
    }
    #[getter]
    fn r(&self) -> Vec<Vec<f64>> {
        rows(self.inner.r())
    }
    #[getter]
    fn c(&self) -> Vec<Vec<f64>> {
        rows(self.inner.c())
    }
    #[getter]
    fn u(&self) -> Vec<f64> {
        self.inner.u().to_vec()
    }
    #[getter]
    fn v(&self) -> Vec<f64> {
        self.inner.v().to_vec()
    }
    #[getter]
    fn rho_r(&self) -> f64 {
        self.inner.rho_r()
    }
    #[getter]
    fn rho_c(&self) -> f64 {
        self.inner.rho_c()
    }

    fn __repr__(&self) -> String {
        format!(
            "MixingPair(n_agents={}, rho_r={:.6}, rho_c={:.6})",
            self.inner.n_agents(),
            self.inner.rho_r(),
            self.inner.rho_c()
        )
    }
}

/// A local objective `f_i`.
#[pyclass(name = "Objective", frozen, from_py_object)]
#[derive(Clone)]
struct PyObjective {
    inner: LocalObjective,
}

#[pymethods]
impl PyObjective {
    /// `lambda * ||theta - center||^p`.
    #[staticmethod]
    #[pyo3(signature = (dim, lam, p, center = None))]
    fn power_norm(dim: usize, lam: f64, p: f64, center: Option<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: LocalObjective::power_norm(dim, lam, p, center.map(Vector::from)).map_err(value_err)?,
        })
    }

    /// `0.5 theta^T A theta + b^T theta + c`.
    #[staticmethod]
    #[pyo3(signature = (a, b, c = 0.0))]
    fn quadratic(a: Vec<Vec<f64>>, b: Vec<f64>, c: f64) -> PyResult<Self> {
        Ok(Self {
            inner: LocalObjective::quadratic(matrix(&a)?, Vector::from(b), c).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn composite(dim: usize, parts: Vec<PyObjective>) -> PyResult<Self> {
        Ok(Self {
            inner: LocalObjective::composite(dim, parts.into_iter().map(|p| p.inner).collect()).map_err(value_err)?,
        })
    }

    fn scaled(&self, s: f64) -> Self {
        Self { inner: self.inner.scaled(s) }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind_name()
    }

    fn value(&self, theta: Vec<f64>) -> PyResult<f64> {
        self.inner.value(&theta).map_err(value_err)
    }

    fn gradient(&self, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.gradient(&theta).map_err(value_err)?.to_vec())
    }
}

/// Runs an algorithm on explicit objectives and returns the final state and
/// the per-iteration records. `c0 = None` disables clipping.
#[pyfunction]
#[pyo3(signature = (mixing, objectives, x0, algorithm = "cgt", alpha = 0.05, c0 = None, max_iters = 100, grad_tol = None))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    mixing: &PyMixingPair,
    objectives: Vec<PyObjective>,
    x0: Vec<Vec<f64>>,
    algorithm: &str,
    alpha: f64,
    c0: Option<f64>,
    max_iters: usize,
    grad_tol: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let objs: Vec<LocalObjective> = objectives.into_iter().map(|o| o.inner).collect();
    let x0 = matrix(&x0)?;
    let mut cfg = AlgoConfig::new(
        self::algorithm(algorithm)?,
        alpha,
        c0.map_or(ClipThreshold::Infinite, ClipThreshold::Finite),
        max_iters,
    );
    cfg.grad_tol = grad_tol;
    let mut rec = VecRecorder::default();
    let result = py
        .detach(|| algo::run(x0, &mixing.inner, &objs, &cfg, &mut rec))
        .map_err(value_err)?;
    let out = PyDict::new(py);
    out.set_item("stop", result.stop.to_string())?;
    out.set_item("iterations", result.iterations)?;
    out.set_item("x", rows(&result.state.x))?;
    out.set_item("y", rows(&result.state.y))?;
    let records = rec.records.iter().map(|r| record_dict(py, r)).collect::<PyResult<Vec<_>>>()?;
    out.set_item("records", records)?;
    Ok(out)
}

/// Runs a TOML config (or `.meta` file) and writes its CSV and meta files.
/// Returns one summary dict per repeat.
#[pyfunction]
fn run_config<'py>(py: Python<'py>, path: &str) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let (cfg, base) = experiment::load_config(Path::new(path)).map_err(experiment_err)?;
    let runs = py.detach(|| experiment::cmd_run(&cfg, &base)).map_err(experiment_err)?;
    runs.iter()
        .map(|art| {
            let d = PyDict::new(py);
            d.set_item("csv_path", art.csv_path().display().to_string())?;
            d.set_item("stop", art.stop.to_string())?;
            d.set_item("iterations", art.iterations)?;
            d.set_item("algorithm", art.algorithm.name())?;
            d.set_item("final_x", rows(&art.final_state.x))?;
            let last = art.records.last().map(|r| record_dict(py, r)).transpose()?;
            d.set_item("last_record", last)?;
            Ok(d)
        })
        .collect()
}

/// Parses and validates config text, returning it normalized.
#[pyfunction]
fn check_config(text: &str) -> PyResult<String> {
    Ok(ExperimentConfig::from_toml(text).map_err(experiment_err)?.to_toml())
}

/// Smoothness and dissimilarity estimates for a config, as printed by the CLI.
#[pyfunction]
#[pyo3(signature = (path, radius = 1.0, samples = 200, c = 1.0))]
fn probe(py: Python<'_>, path: &str, radius: f64, samples: usize, c: f64) -> PyResult<String> {
    let (cfg, base) = experiment::load_config(Path::new(path)).map_err(experiment_err)?;
    py.detach(|| {
        let prep = experiment::prepare(&cfg, &base)?;
        let settings = ProbeSettings {
            radius,
            n_samples: samples,
            seed: cfg.seed,
            c,
        };
        experiment::probe(&prep, &settings).map(|r| r.to_string())
    })
    .map_err(experiment_err)
}

/// `min{1, c0/||y||}`.
#[pyfunction]
fn clip_factor(y: Vec<f64>, c0: f64) -> f64 {
    algo::clip_factor(&y, c0)
}

/// Compares the clipped local stepsize with the idealized one; returns the
/// two slacks, both nonnegative when the inequalities hold.
#[pyfunction]
fn clipped_step_check<'py>(
    py: Python<'py>,
    y_i: Vec<f64>,
    v_i: f64,
    grad_f: Vec<f64>,
    alpha: f64,
    c0: f64,
    v_norm: f64,
) -> PyResult<Bound<'py, PyDict>> {
    if !(v_i > 0.0 && v_norm >= v_i) || y_i.len() != grad_f.len() {
        return Err(PyValueError::new_err("need 0 < v_i <= v_norm and matching lengths"));
    }
    let r = algo::clipped_step_check(&y_i, v_i, &grad_f, alpha, c0, v_norm);
    let d = PyDict::new(py);
    d.set_item("alpha_i", r.alpha_i)?;
    d.set_item("alpha_bar_i", r.alpha_bar_i)?;
    d.set_item("alpha_bar", r.alpha_bar)?;
    d.set_item("deviation_slack", r.deviation_slack())?;
    d.set_item("ordering_slack", r.ordering_slack())?;
    d.set_item("holds", r.holds())?;
    Ok(d)
}

#[pymodule]
fn cgt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMixingPair>()?;
    m.add_class::<PyObjective>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    m.add_function(wrap_pyfunction!(check_config, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    m.add_function(wrap_pyfunction!(clip_factor, m)?)?;
    m.add_function(wrap_pyfunction!(clipped_step_check, m)?)?;
    Ok(())
}
