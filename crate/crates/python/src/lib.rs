//! Python bindings. Matrices cross the boundary as lists of rows and group
//! labels as 0-based integer lists; reports come back as dicts.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde::Serialize;

use fairot::costlearn::{match_with_learned_cost, LearnedCost};
use fairot::harness::{run_sweep as harness_sweep, solve_point, Method, ProblemData, SweepSpec};
use fairot::oracle::{agreement_suite, AgreementSpec};
use fairot::synthdata::{DatasetKind, GenSpec};
use fairot::{
    CostMatrix, Error, FairnessTarget, GcgConfig, GroupLabels, LabeledDataset, SinkhornConfig,
    SolverReport,
};

type Rows = Vec<Vec<f64>>;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Solver(_) | Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> fairot::Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument(format!("{what} is empty")));
    }
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidArgument(format!(
            "{what} rows have different lengths"
        )));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn labels(labels: &[usize], groups: Option<usize>) -> fairot::Result<GroupLabels> {
    let k = groups.unwrap_or_else(|| labels.iter().max().map_or(1, |&l| l + 1));
    GroupLabels::new(labels.to_vec(), k)
}

fn target(rows: &[Vec<f64>]) -> fairot::Result<FairnessTarget> {
    FairnessTarget::new(matrix(rows, "target")?)
}

fn dataset(points: &[Vec<f64>], group: &[usize], groups: usize) -> fairot::Result<LabeledDataset> {
    LabeledDataset::new(matrix(points, "points")?, labels(group, Some(groups))?)
}

/// Serializes through JSON into plain Python objects.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn sinkhorn_config(
    epsilon: f64,
    max_iter: usize,
    tol: f64,
    log_domain: Option<bool>,
) -> SinkhornConfig {
    let cfg = SinkhornConfig::new(epsilon)
        .with_max_iter(max_iter)
        .with_tol(tol);
    match log_domain {
        Some(l) => cfg.with_log_domain(l),
        None => cfg,
    }
}

/// Squared Euclidean cost between the rows of `x` and `y`.
#[pyfunction]
fn squared_euclidean(x: Rows, y: Rows) -> PyResult<Rows> {
    let c = CostMatrix::squared_euclidean(
        &matrix(&x, "x").map_err(to_py_err)?,
        &matrix(&y, "y").map_err(to_py_err)?,
    )
    .map_err(to_py_err)?;
    Ok(rows(c.values()))
}

/// Entropic OT with uniform marginals. Returns `(plan, report)`.
#[pyfunction]
#[pyo3(signature = (cost, epsilon, max_iter = 1000, tol = 1e-6, log_domain = None))]
fn sinkhorn<'py>(
    py: Python<'py>,
    cost: Rows,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
    log_domain: Option<bool>,
) -> PyResult<(Rows, Bound<'py, PyAny>)> {
    let cfg = sinkhorn_config(epsilon, max_iter, tol, log_domain);
    let out = py
        .detach(|| fairot::sinkhorn(&CostMatrix::new(matrix(&cost, "cost")?)?, &cfg))
        .map_err(to_py_err)?;
    Ok((rows(out.plan.values()), to_py(py, &out.report)?))
}

/// Entropic OT whose group coupling equals `target`. With `repair`, a target
/// that misses the empirical group marginals is projected onto them first.
#[pyfunction]
#[pyo3(signature = (cost, target, src, dst, epsilon, max_iter = 1000, tol = 1e-6, log_domain = None, repair = false))]
#[allow(clippy::too_many_arguments)]
fn fair_sinkhorn<'py>(
    py: Python<'py>,
    cost: Rows,
    target: Rows,
    src: Vec<usize>,
    dst: Vec<usize>,
    epsilon: f64,
    max_iter: usize,
    tol: f64,
    log_domain: Option<bool>,
    repair: bool,
) -> PyResult<(Rows, Bound<'py, PyAny>)> {
    let cfg = sinkhorn_config(epsilon, max_iter, tol, log_domain);
    let out = py
        .detach(|| {
            let f = self::target(&target)?;
            let (s, w) = f.shape();
            let (src, dst) = (labels(&src, Some(s))?, labels(&dst, Some(w))?);
            let f = fairot::fairness::resolve_target(&f, &src, &dst, repair)?;
            fairot::fair_sinkhorn(
                &CostMatrix::new(matrix(&cost, "cost")?)?,
                &f,
                &src,
                &dst,
                &cfg,
            )
        })
        .map_err(to_py_err)?;
    Ok((rows(out.plan.values()), to_py(py, &out.report)?))
}

/// Penalized GCG solve. Returns `(plan, report, trace)`.
#[pyfunction]
#[pyo3(signature = (cost, target, src, dst, lam, epsilon = 1.0))]
fn penalized_gcg<'py>(
    py: Python<'py>,
    cost: Rows,
    target: Rows,
    src: Vec<usize>,
    dst: Vec<usize>,
    lam: f64,
    epsilon: f64,
) -> PyResult<(Rows, Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let out = py
        .detach(|| {
            let f = self::target(&target)?;
            let (s, w) = f.shape();
            fairot::penalized_gcg(
                &CostMatrix::new(matrix(&cost, "cost")?)?,
                &f,
                &labels(&src, Some(s))?,
                &labels(&dst, Some(w))?,
                &GcgConfig::new(lam, epsilon),
            )
        })
        .map_err(to_py_err)?;
    Ok((
        rows(out.plan.values()),
        to_py(py, &out.report)?,
        to_py(py, &out.trace)?,
    ))
}

/// ½‖group_coupling(plan) − target‖²_F.
#[pyfunction]
fn fairness_loss(plan: Rows, target: Rows, src: Vec<usize>, dst: Vec<usize>) -> PyResult<f64> {
    (|| {
        let f = self::target(&target)?;
        let (s, w) = f.shape();
        fairot::fairness_loss(
            &matrix(&plan, "plan")?,
            &f,
            &labels(&src, Some(s))?,
            &labels(&dst, Some(w))?,
        )
    })()
    .map_err(to_py_err)
}

/// Synthetic data: returns `(x, x_labels, y, y_labels)` with 0-based labels.
#[pyfunction]
#[pyo3(signature = (kind, n_x, n_y, seed = 0))]
fn generate(
    kind: &str,
    n_x: usize,
    n_y: usize,
    seed: u64,
) -> PyResult<(Rows, Vec<usize>, Rows, Vec<usize>)> {
    let kind: DatasetKind = kind.parse().map_err(to_py_err)?;
    let spec = match kind {
        DatasetKind::Gaussians => GenSpec::gaussians(n_x, n_y, seed),
        DatasetKind::Circles => GenSpec::circles(n_x, n_y, seed),
    };
    let (x, y) = spec.generate().map_err(to_py_err)?;
    Ok((
        rows(x.points()),
        x.labels().labels().to_vec(),
        rows(y.points()),
        y.labels().labels().to_vec(),
    ))
}

/// Solves one point of any method on the given samples, as the sweep would.
/// `value` is ε for `vanilla`/`fair_sinkhorn` and λ otherwise. `config` is an
/// optional sweep-spec JSON for the remaining settings. Returns a dict with
/// `record`, `plan`, `report`, `trace`, `model` and `history`.
#[pyfunction]
#[pyo3(signature = (method, value, x, x_labels, y, y_labels, target = None, config = None))]
#[allow(clippy::too_many_arguments)]
fn solve<'py>(
    py: Python<'py>,
    method: &str,
    value: f64,
    x: Rows,
    x_labels: Vec<usize>,
    y: Rows,
    y_labels: Vec<usize>,
    target: Option<Rows>,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let mut spec: SweepSpec = from_json(config)?;
    spec.method = method.parse::<Method>().map_err(to_py_err)?;
    spec.grid = vec![value];
    let outcome = py
        .detach(|| {
            if let Some(t) = &target {
                spec.target = self::target(t)?;
            }
            spec.validate()?;
            let (s, w) = spec.target.shape();
            let data = ProblemData::from_samples(
                &spec,
                dataset(&x, &x_labels, s)?,
                dataset(&y, &y_labels, w)?,
            )?;
            Ok::<_, Error>(solve_point(&spec, &data, 0))
        })
        .map_err(to_py_err)?;
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("record", to_py(py, &outcome.record)?)?;
    dict.set_item("plan", outcome.plan.as_ref().map(rows))?;
    dict.set_item("report", to_py(py, &outcome.report)?)?;
    dict.set_item("trace", to_py(py, &outcome.trace)?)?;
    dict.set_item("model", to_py(py, &outcome.model)?)?;
    dict.set_item("history", to_py(py, &outcome.history)?)?;
    Ok(dict.into_any())
}

/// Entropic plan under a learned cost (JSON as returned in `solve(...)["model"]`).
/// Returns `(plan, report)` with the report's fairness loss against `target`.
#[pyfunction]
#[pyo3(signature = (model, x, x_labels, y, y_labels, target, epsilon = 1.0))]
#[allow(clippy::too_many_arguments)]
fn match_learned<'py>(
    py: Python<'py>,
    model: &str,
    x: Rows,
    x_labels: Vec<usize>,
    y: Rows,
    y_labels: Vec<usize>,
    target: Rows,
    epsilon: f64,
) -> PyResult<(Rows, Bound<'py, PyAny>)> {
    let model: LearnedCost =
        serde_json::from_str(model).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let (plan, report): (_, SolverReport) = py
        .detach(|| {
            let f = self::target(&target)?;
            let (s, w) = f.shape();
            let (x, y) = (dataset(&x, &x_labels, s)?, dataset(&y, &y_labels, w)?);
            let f = fairot::fairness::resolve_target(&f, x.labels(), y.labels(), true)?;
            match_with_learned_cost(&model, &x, &y, &f, &SinkhornConfig::new(epsilon))
        })
        .map_err(to_py_err)?;
    Ok((rows(plan.values()), to_py(py, &report)?))
}

/// Runs (or resumes) a sweep into `out_dir`; returns the records.
#[pyfunction]
#[pyo3(signature = (config, out_dir, jobs = 1))]
fn run_sweep<'py>(
    py: Python<'py>,
    config: &str,
    out_dir: PathBuf,
    jobs: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let spec: SweepSpec = from_json(Some(config))?;
    let out = py
        .detach(|| harness_sweep(&spec, &out_dir, jobs))
        .map_err(to_py_err)?;
    to_py(py, &out.records)
}

/// Solver/oracle agreement gaps; `config` is an optional agreement-spec JSON.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn oracle_check<'py>(py: Python<'py>, config: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let spec: AgreementSpec = from_json(config)?;
    let records = py.detach(|| agreement_suite(&spec)).map_err(to_py_err)?;
    to_py(py, &records)
}

#[pymodule]
fn fairot_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(squared_euclidean, m)?)?;
    m.add_function(wrap_pyfunction!(sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(fair_sinkhorn, m)?)?;
    m.add_function(wrap_pyfunction!(penalized_gcg, m)?)?;
    m.add_function(wrap_pyfunction!(fairness_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(match_learned, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    Ok(())
}
