//! Python module `twoscale_ocp`.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use twoscale_ocp::cli::{self as runner, RunOptions, Scale};
use twoscale_ocp::losses::Formulation;
use twoscale_ocp::metrics_io;
use twoscale_ocp::netcore::{self, blob};
use twoscale_ocp::problems::{self, BenchmarkId};
use twoscale_ocp::Error;

create_exception!(twoscale_ocp, NumericError, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Numeric { .. } => NumericError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn point(x: Vec<f64>) -> PyResult<[f64; 2]> {
    <[f64; 2]>::try_from(x).map_err(|v| PyValueError::new_err(format!("expected 2 coordinates, got {}", v.len())))
}

fn benchmark_id(name: &str) -> PyResult<BenchmarkId> {
    name.parse().map_err(to_py)
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "TwoScaleConfig", module = "twoscale_ocp", from_py_object)]
#[derive(Clone)]
struct PyTwoScale(netcore::TwoScaleConfig);

#[pymethods]
impl PyTwoScale {
    #[new]
    fn new(gamma: f64, center: Vec<f64>) -> PyResult<Self> {
        netcore::TwoScaleConfig::new(gamma, center).map(PyTwoScale).map_err(to_py)
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }

    #[getter]
    fn center(&self) -> Vec<f64> {
        self.0.center.clone()
    }

    fn scale(&self, eps: f64) -> PyResult<f64> {
        self.0.scale(eps).map_err(to_py)
    }

    fn features(&self, x: Vec<f64>, eps: f64) -> PyResult<Vec<f64>> {
        netcore::two_scale_features(&x, eps, &self.0).map_err(to_py)
    }
}

#[pyclass(name = "MlpParams", module = "twoscale_ocp", from_py_object)]
#[derive(Clone)]
struct PyParams(netcore::MlpParams);

#[pymethods]
impl PyParams {
    #[staticmethod]
    fn init(layer_sizes: Vec<usize>, seed: u64) -> PyResult<Self> {
        netcore::init_params(&layer_sizes, seed).map(PyParams).map_err(to_py)
    }

    #[staticmethod]
    fn from_flat(layer_sizes: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        netcore::MlpParams::from_flat(&layer_sizes, data).map(PyParams).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        blob::load_params(&path).map(PyParams).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        blob::save_params(&self.0, &path).map_err(to_py)
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.0.layer_sizes().to_vec()
    }

    fn flat(&self) -> Vec<f64> {
        self.0.as_slice().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn forward(&self, features: Vec<f64>) -> PyResult<f64> {
        netcore::forward(&self.0, &features).map_err(to_py)
    }

    /// `(value, grad, laplacian)` at `x`.
    fn eval(&self, cfg: &PyTwoScale, x: Vec<f64>, eps: f64) -> PyResult<(f64, Vec<f64>, f64)> {
        let e = netcore::eval_net(&self.0, &cfg.0, &x, eps).map_err(to_py)?;
        Ok((e.value, e.grad, e.laplacian))
    }
}

#[pyclass(name = "RunConfig", module = "twoscale_ocp", from_py_object)]
#[derive(Clone)]
struct PyRunConfig(runner::RunConfig);

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    #[pyo3(signature = (benchmark, formulation, eps, scale = "desk"))]
    fn preset(benchmark: &str, formulation: &str, eps: f64, scale: &str) -> PyResult<Self> {
        let scale = match scale {
            "paper" => Scale::Paper,
            "desk" => Scale::Desk,
            s => return Err(PyValueError::new_err(format!("unknown scale `{s}` (expected paper or desk)"))),
        };
        let f: Formulation = formulation.parse().map_err(to_py)?;
        Ok(PyRunConfig(runner::RunConfig::preset(benchmark_id(benchmark)?, f, eps, scale)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        runner::load_config(&path).map(PyRunConfig).map_err(to_py)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        runner::parse_config(text, std::path::Path::new("<string>")).map(PyRunConfig).map_err(to_py)
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(to_py)
    }

    fn stages(&self) -> PyResult<Vec<f64>> {
        self.0.continuation.stages().map_err(to_py)
    }

    #[getter]
    fn benchmark(&self) -> &'static str {
        self.0.benchmark.name()
    }

    #[getter]
    fn formulation(&self) -> String {
        self.0.formulation.to_string()
    }

    #[getter]
    fn eps(&self) -> f64 {
        self.0.eps
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
    }

    #[getter]
    fn epochs_per_stage(&self) -> u64 {
        self.0.continuation.epochs_per_stage
    }

    #[setter]
    fn set_epochs_per_stage(&mut self, n: u64) {
        self.0.continuation.epochs_per_stage = n;
    }

    #[getter]
    fn hidden(&self) -> Vec<usize> {
        self.0.network.hidden.clone()
    }

    #[setter]
    fn set_hidden(&mut self, hidden: Vec<usize>) {
        self.0.network.hidden = hidden;
    }

    #[getter]
    fn interior(&self) -> (usize, usize) {
        let [a, b] = self.0.collocation.interior;
        (a, b)
    }

    #[setter]
    fn set_interior(&mut self, n: (usize, usize)) {
        self.0.collocation.interior = [n.0, n.1];
    }

    #[getter]
    fn boundary_per_side(&self) -> usize {
        self.0.collocation.boundary_per_side
    }

    #[setter]
    fn set_boundary_per_side(&mut self, n: usize) {
        self.0.collocation.boundary_per_side = n;
    }

    #[getter]
    fn log_every(&self) -> u64 {
        self.0.output.log_every
    }

    #[setter]
    fn set_log_every(&mut self, n: u64) {
        self.0.output.log_every = n;
    }

    #[getter]
    fn checkpoint_every(&self) -> Option<u64> {
        self.0.output.checkpoint_every
    }

    #[setter]
    fn set_checkpoint_every(&mut self, n: Option<u64>) {
        self.0.output.checkpoint_every = n;
    }

    #[getter]
    fn grid(&self) -> (usize, usize) {
        let [a, b] = self.0.output.grid;
        (a, b)
    }

    #[setter]
    fn set_grid(&mut self, n: (usize, usize)) {
        self.0.output.grid = [n.0, n.1];
    }
}

#[pyclass(name = "ReferenceField", module = "twoscale_ocp")]
struct PyReference(metrics_io::ReferenceField);

#[pymethods]
impl PyReference {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        metrics_io::load_reference(&path).map(PyReference).map_err(to_py)
    }

    fn value(&self, x: Vec<f64>) -> PyResult<f64> {
        Ok(self.0.value(point(x)?))
    }

    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }
}

/// `(value, grad, laplacian)` of the network at `x`.
#[pyfunction]
fn eval_net(params: &PyParams, cfg: &PyTwoScale, x: Vec<f64>, eps: f64) -> PyResult<(f64, Vec<f64>, f64)> {
    params.eval(cfg, x, eps)
}

/// Exact `(y, p)` at `x`, or None where no closed form exists.
#[pyfunction]
fn exact_solution(benchmark_name: &str, x: Vec<f64>, eps: f64) -> PyResult<Option<(f64, f64)>> {
    Ok(problems::exact_solution(benchmark_id(benchmark_name)?, point(x)?, eps))
}

/// Trains and returns the run summary as a dict.
#[pyfunction]
#[pyo3(signature = (config, out = None, reference = None, threads = 1, resume = false))]
fn run<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    out: Option<PathBuf>,
    reference: Option<PathBuf>,
    threads: usize,
    resume: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = RunOptions { out, reference, threads, resume, quiet: true };
    let cfg = config.0.clone();
    let outcome = py.detach(|| runner::run_experiment(&cfg, &opts)).map_err(to_py)?;
    json_to_py(py, &outcome.summary)
}

#[pyfunction]
fn gradcheck<'py>(py: Python<'py>, config: &PyRunConfig) -> PyResult<Bound<'py, PyAny>> {
    let cfg = &config.0;
    let spec = cfg.problem(cfg.eps).map_err(to_py)?;
    let report = runner::gradcheck(cfg, &spec, false).map_err(to_py)?;
    let d = json_to_py(py, &report)?;
    d.set_item("max_error", report.max_error())?;
    d.set_item("passed", report.passed())?;
    Ok(d)
}

/// `(verdict, max_difference)` for two run directories.
#[pyfunction]
fn compare(run_a: PathBuf, run_b: PathBuf) -> PyResult<(String, f64)> {
    let r = runner::compare_runs(&run_a, &run_b).map_err(to_py)?;
    Ok((r.verdict(), r.max_difference))
}

/// Initial collocation set: interior points and `(x1, x2, side)` triples.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn sample(config: &PyRunConfig) -> PyResult<(Vec<(f64, f64)>, Vec<(f64, f64, &'static str)>)> {
    let cfg = &config.0;
    cfg.validate().map_err(to_py)?;
    let spec = cfg.problem(cfg.continuation.eps0).map_err(to_py)?;
    let set = runner::run::build_collocation(cfg, &spec);
    Ok((
        set.interior.iter().map(|x| (x[0], x[1])).collect(),
        set.boundary.iter().map(|b| (b.x[0], b.x[1], b.side.name())).collect(),
    ))
}

#[pymodule(name = "twoscale_ocp")]
fn init_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NumericError", m.py().get_type::<NumericError>())?;
    m.add_class::<PyTwoScale>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyReference>()?;
    m.add_function(wrap_pyfunction!(eval_net, m)?)?;
    m.add_function(wrap_pyfunction!(exact_solution, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    Ok(())
}
