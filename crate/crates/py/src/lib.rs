//! Python bindings. Configs and reports cross the boundary as JSON, so the
//! Python side sees exactly what the `ccmfg` binary writes.

use ccmfg::cli::{self, to_json, Mode, RunConfig, SweepParam};
use ccmfg::equilibrium_det::{eval_f, PopulationStates, UniformModel};
use ccmfg::error::Error;
use ccmfg::model::{CostSpec, Dynamics, Problem};
use ccmfg::tracking::solve_riccati;
use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidInput { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn mode(name: &str) -> PyResult<Mode> {
    name.parse().map_err(to_py)
}

fn rows(values: &[Vec<f64>], field: &str) -> PyResult<(usize, usize, Vec<f64>)> {
    let r = values.len();
    let c = values.first().map_or(0, Vec::len);
    if values.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err(format!("{field}: ragged rows")));
    }
    Ok((r, c, values.concat()))
}

/// A validated run config.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: cli::parse_config(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str, seed: Option<u64>) -> PyResult<Self> {
        Ok(Self {
            inner: cli::load_config(path.as_ref(), seed).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner).map_err(to_py)
    }

    /// Copy with `q`, `r` or `M` replaced.
    fn with_parameter(&self, name: &str, value: f64) -> PyResult<Self> {
        let param: SweepParam = name.parse().map_err(to_py)?;
        let inner = self.inner.with_parameter(param, value);
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.population.rng_seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.population.rng_seed = seed;
    }

    fn __repr__(&self) -> String {
        match &self.inner.label {
            Some(l) => format!("Config({l:?})"),
            None => "Config()".to_string(),
        }
    }
}

/// Uniform linear-quadratic problem with its precomputed basin geometry.
#[pyclass(name = "TrackingProblem")]
struct PyProblem {
    model: UniformModel,
}

#[pymethods]
impl PyProblem {
    #[new]
    #[pyo3(signature = (drift, input, q, r, terminal, horizon, destinations, steps = 800))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        drift: Vec<Vec<f64>>,
        input: Vec<Vec<f64>>,
        q: f64,
        r: f64,
        terminal: f64,
        horizon: f64,
        destinations: Vec<Vec<f64>>,
        steps: usize,
    ) -> PyResult<Self> {
        let (n, nc, a) = rows(&drift, "drift")?;
        let (nb, m, b) = rows(&input, "input")?;
        if nc != n || nb != n {
            return Err(PyValueError::new_err("drift must be n×n and input n×m"));
        }
        let dynamics = Dynamics::from_rows(n, m, &a, &b).map_err(to_py)?;
        let points = destinations.into_iter().map(DVector::from_vec).collect();
        let cost = CostSpec::new(q, r, terminal, horizon, points).map_err(to_py)?;
        let problem = Problem::new(dynamics, cost, steps).map_err(to_py)?;
        Ok(Self {
            model: UniformModel::new(problem).map_err(to_py)?,
        })
    }

    /// Riccati matrix at time `t`, row by row.
    fn riccati(&self, t: f64) -> PyResult<Vec<Vec<f64>>> {
        let g = solve_riccati(&self.model.problem).map_err(to_py)?.eval(t);
        Ok(g.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    /// Threshold slope for two destinations.
    fn binary_slope(&self) -> f64 {
        self.model.binary_slope()
    }

    /// Destination chosen from `state` when the population starts at
    /// `initial_mean` and splits as `split`.
    fn classify(&self, initial_mean: Vec<f64>, split: Vec<f64>, state: Vec<f64>) -> usize {
        let basins = self.model.basins(&DVector::from_vec(initial_mean), &split);
        basins.classify(&DVector::from_vec(state)).destination
    }

    /// Candidate mean path at the grid nodes as `(times, states)`.
    fn candidate_path(&self, initial_mean: Vec<f64>, split: Vec<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let path = self
            .model
            .candidate_path(&DVector::from_vec(initial_mean), &split);
        let states = path
            .nodes()
            .iter()
            .map(|x| x.iter().copied().collect())
            .collect();
        (path.grid().nodes(), states)
    }

    /// Best-response counts of a finite population given current counts.
    fn best_response_counts(
        &self,
        states: Vec<Vec<f64>>,
        counts: Vec<usize>,
    ) -> PyResult<Vec<usize>> {
        let pop = PopulationStates::new(states.into_iter().map(DVector::from_vec).collect())
            .map_err(to_py)?;
        eval_f(&self.model, &pop, &counts).map_err(to_py)
    }
}

#[pyfunction]
#[pyo3(signature = (config, mode = "stoch"))]
fn equilibria<'py>(py: Python<'py>, config: &PyConfig, mode: &str) -> PyResult<Bound<'py, PyAny>> {
    let m = self::mode(mode)?;
    let report = py
        .detach(|| cli::cmd_equilibria(&config.inner, m))
        .map_err(to_py)?;
    loads(py, &to_json(&report).map_err(to_py)?)
}

#[pyfunction]
fn hetero<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let report = py
        .detach(|| cli::cmd_hetero(&config.inner))
        .map_err(to_py)?;
    loads(py, &to_json(&report).map_err(to_py)?)
}

/// Returns `(report, trajectories_csv, mean_csv)`.
#[pyfunction]
#[pyo3(signature = (config, mode = "stoch", split = None, agents = None))]
fn simulate<'py>(
    py: Python<'py>,
    config: &PyConfig,
    mode: &str,
    split: Option<Vec<f64>>,
    agents: Option<usize>,
) -> PyResult<(Bound<'py, PyAny>, String, String)> {
    let m = self::mode(mode)?;
    let out = py
        .detach(|| cli::cmd_simulate(&config.inner, m, split.as_deref(), agents))
        .map_err(to_py)?;
    let report = loads(py, &to_json(&out.report).map_err(to_py)?)?;
    Ok((report, out.trajectories, out.mean))
}

#[pyfunction]
#[pyo3(signature = (config, param, values, mode = "stoch"))]
fn sweep<'py>(
    py: Python<'py>,
    config: &PyConfig,
    param: &str,
    values: Vec<f64>,
    mode: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let m = self::mode(mode)?;
    let p: SweepParam = param.parse().map_err(to_py)?;
    let report = py
        .detach(|| cli::cmd_sweep(&config.inner, m, p, &values))
        .map_err(to_py)?;
    loads(py, &to_json(&report).map_err(to_py)?)
}

/// Returns `(report, table_csv)`.
#[pyfunction]
#[pyo3(signature = (config, sizes, mode = "stoch"))]
fn nash<'py>(
    py: Python<'py>,
    config: &PyConfig,
    sizes: Vec<usize>,
    mode: &str,
) -> PyResult<(Bound<'py, PyAny>, String)> {
    let m = self::mode(mode)?;
    let out = py
        .detach(|| cli::cmd_nash(&config.inner, m, &sizes))
        .map_err(to_py)?;
    Ok((loads(py, &to_json(&out.report).map_err(to_py)?)?, out.table))
}

#[pymodule]
fn ccmfg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyProblem>()?;
    m.add_function(wrap_pyfunction!(equilibria, m)?)?;
    m.add_function(wrap_pyfunction!(hetero, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(nash, m)?)?;
    Ok(())
}
