//! Python bindings: parse specs, build plans, run farms locally, and
//! model-check the process network.
//!
//!     import csp_farm
//!     spec = csp_farm.parse_spec(open("mandel.spec").read())
//!     run = csp_farm.run_local(spec, clusters=2, width=1400, escape=250)
//!     print(run.summary["white"], run.timing_csv)

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use csp_farm::local::{run_local as run_local_core, LocalOptions};
use csp_farm::manifest::{render_host_plan, render_node_plan};
use csp_farm::model_check::{check_all, Model, Mutation, DEFAULT_STATE_LIMIT};
use csp_farm::netchan::{decode_frame as decode_core, encode_frame as encode_core};
use csp_farm::spec_dsl::{render_spec, validate_spec};
use csp_farm::topology::{build_named_plans, DEFAULT_APP_PORT, DEFAULT_LOAD_PORT};
use csp_farm::workload::mandelbrot;
use csp_farm::{Frame, FrameKind, Registry, Summary};

create_exception!(csp_farm, FarmError, PyException, "A deployment, protocol or workload failure.");
create_exception!(csp_farm, SpecError, PyValueError, "A network spec that does not parse or validate.");

fn spec_err(e: impl ToString) -> PyErr {
    SpecError::new_err(e.to_string())
}

fn farm_err(e: impl ToString) -> PyErr {
    FarmError::new_err(e.to_string())
}

/// A parsed and validated network spec.
#[pyclass(frozen, name = "NetworkSpec")]
struct PyNetworkSpec(csp_farm::NetworkSpec);

#[pymethods]
impl PyNetworkSpec {
    #[getter]
    fn host_ip(&self) -> String {
        self.0.host_ip.to_string()
    }

    #[getter]
    fn clusters(&self) -> u32 {
        self.0.clusters
    }

    #[getter]
    fn workers_per_node(&self) -> u32 {
        self.0.workers_per_node
    }

    #[getter]
    fn source_workload(&self) -> String {
        self.0.source.workload.clone()
    }

    #[getter]
    fn source_args(&self) -> Vec<i64> {
        self.0.source.init_args.clone()
    }

    #[getter]
    fn sink_workload(&self) -> String {
        self.0.sink.workload.clone()
    }

    /// Source text with every value written literally.
    fn render(&self) -> String {
        render_spec(&self.0)
    }

    fn __repr__(&self) -> String {
        format!(
            "NetworkSpec(host_ip='{}', clusters={}, workers_per_node={}, source='{}', args={:?})",
            self.0.host_ip, self.0.clusters, self.0.workers_per_node, self.0.source.workload, self.0.source.init_args
        )
    }
}

#[pyfunction]
fn parse_spec(text: &str) -> PyResult<PyNetworkSpec> {
    let spec = csp_farm::parse_spec(text).map_err(spec_err)?;
    Ok(PyNetworkSpec(validate_spec(spec, &Registry::with_builtins()).map_err(spec_err)?))
}

/// Returns the host and node plan manifests as text.
#[pyfunction]
#[pyo3(signature = (spec, name = "app", load_port = DEFAULT_LOAD_PORT, app_port = DEFAULT_APP_PORT))]
fn build_plans(spec: &PyNetworkSpec, name: &str, load_port: u16, app_port: u16) -> PyResult<(String, String)> {
    let (host, nodes) = build_named_plans(name, &spec.0, load_port, app_port).map_err(spec_err)?;
    Ok((render_host_plan(&host), render_node_plan(&nodes[0])))
}

fn counters(s: &Summary) -> BTreeMap<String, u64> {
    s.counters.iter().cloned().collect()
}

/// Outcome of a local run.
#[pyclass(frozen, name = "RunResult")]
struct RunResult {
    #[pyo3(get)]
    summary: BTreeMap<String, u64>,
    #[pyo3(get)]
    timing_csv: String,
    /// Instances processed per node index.
    #[pyo3(get)]
    processed: BTreeMap<u32, u64>,
    #[pyo3(get)]
    open_handles_after: usize,
    pgm: Option<Vec<u8>>,
}

#[pymethods]
impl RunResult {
    /// The image as PGM bytes, or None when image mode was off.
    #[getter]
    fn pgm<'py>(&self, py: Python<'py>) -> Option<Bound<'py, PyBytes>> {
        self.pgm.as_deref().map(|b| PyBytes::new(py, b))
    }

    fn __repr__(&self) -> String {
        format!("RunResult(summary={:?})", self.summary)
    }
}

/// Runs host and nodes in-process. Overrides replace the spec's cluster
/// count, workers per node, and first two source arguments.
#[pyfunction]
#[pyo3(signature = (spec, clusters = None, workers = None, width = None, escape = None, image = false))]
fn run_local(
    py: Python<'_>,
    spec: &PyNetworkSpec,
    clusters: Option<u32>,
    workers: Option<u32>,
    width: Option<i64>,
    escape: Option<i64>,
    image: bool,
) -> PyResult<RunResult> {
    let mut s = spec.0.clone();
    s.clusters = clusters.unwrap_or(s.clusters);
    s.workers_per_node = workers.unwrap_or(s.workers_per_node);
    for (i, v) in [width, escape].into_iter().enumerate() {
        if let (Some(v), Some(slot)) = (v, s.source.init_args.get_mut(i)) {
            *slot = v;
        }
    }
    let registry = Registry::with_builtins();
    let s = validate_spec(s, &registry).map_err(spec_err)?;
    let opts = LocalOptions { image, ..Default::default() };
    let out = py.detach(|| run_local_core(&s, &registry, &opts)).map_err(farm_err)?;
    Ok(RunResult {
        summary: counters(&out.summary),
        timing_csv: out.report.to_csv(),
        processed: out.counters.processed.clone(),
        open_handles_after: out.open_handles_after,
        pgm: out.summary.image.as_ref().map(|i| i.to_pgm()),
    })
}

/// Single-threaded Mandelbrot reference counts.
#[pyfunction]
fn sequential(py: Python<'_>, width: i64, escape: i64) -> PyResult<BTreeMap<String, u64>> {
    let s = py.detach(|| mandelbrot::sequential(width, escape, false)).map_err(farm_err)?;
    Ok(counters(&s))
}

/// One model-checking verdict.
#[pyclass(frozen, name = "CheckResult")]
struct PyCheckResult {
    #[pyo3(get)]
    name: &'static str,
    #[pyo3(get)]
    passed: bool,
    #[pyo3(get)]
    states: usize,
    #[pyo3(get)]
    seconds: f64,
    /// Events of the counterexample, e.g. `["a.A", "b.0.S", ...]`.
    #[pyo3(get)]
    counterexample: Option<Vec<String>>,
    #[pyo3(get)]
    detail: String,
}

#[pymethods]
impl PyCheckResult {
    fn __repr__(&self) -> String {
        format!("CheckResult({:?}, passed={}, states={})", self.name, self.passed, self.states)
    }
}

#[pyfunction]
#[pyo3(signature = (clusters, mutation = None, state_limit = DEFAULT_STATE_LIMIT))]
fn check(py: Python<'_>, clusters: usize, mutation: Option<&str>, state_limit: usize) -> PyResult<Vec<PyCheckResult>> {
    let mutation = mutation.map(str::parse::<Mutation>).transpose().map_err(|e| PyValueError::new_err(e.to_string()))?;
    let model = Model::new(clusters, mutation).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let results = py.detach(|| check_all(model, state_limit)).map_err(farm_err)?;
    Ok(results
        .into_iter()
        .map(|r| PyCheckResult {
            name: r.assertion.name(),
            passed: r.passed,
            states: r.states,
            seconds: r.elapsed.as_secs_f64(),
            counterexample: r.counterexample.map(|t| t.iter().map(ToString::to_string).collect()),
            detail: r.detail,
        })
        .collect())
}

const KINDS: [(&str, FrameKind); 6] = [
    ("REGISTER", FrameKind::Register),
    ("PLAN", FrameKind::Plan),
    ("SYNC", FrameKind::Sync),
    ("DATA", FrameKind::Data),
    ("ACK", FrameKind::Ack),
    ("TIMING", FrameKind::Timing),
];

#[pyfunction]
fn encode_frame<'py>(py: Python<'py>, kind: &str, channel: u16, payload: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let kind = KINDS
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(kind))
        .map(|(_, k)| *k)
        .ok_or_else(|| PyValueError::new_err(format!("unknown frame kind {kind}")))?;
    let bytes = encode_core(&Frame::new(kind, channel, payload)).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(PyBytes::new(py, &bytes))
}

/// Decodes one frame from the front of `data`: `(kind, channel, payload, bytes_used)`.
#[pyfunction]
fn decode_frame<'py>(py: Python<'py>, data: &[u8]) -> PyResult<(&'static str, u16, Bound<'py, PyBytes>, usize)> {
    let (f, used) = decode_core(data).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let name = KINDS.iter().find(|(_, k)| *k == f.kind).map(|(n, _)| *n).expect("every kind is named");
    Ok((name, f.channel, PyBytes::new(py, &f.payload), used))
}

#[pymodule]
#[pyo3(name = "csp_farm")]
fn csp_farm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FarmError", m.py().get_type::<FarmError>())?;
    m.add("SpecError", m.py().get_type::<SpecError>())?;
    m.add_class::<PyNetworkSpec>()?;
    m.add_class::<RunResult>()?;
    m.add_class::<PyCheckResult>()?;
    m.add_function(wrap_pyfunction!(parse_spec, m)?)?;
    m.add_function(wrap_pyfunction!(build_plans, m)?)?;
    m.add_function(wrap_pyfunction!(run_local, m)?)?;
    m.add_function(wrap_pyfunction!(sequential, m)?)?;
    m.add_function(wrap_pyfunction!(check, m)?)?;
    m.add_function(wrap_pyfunction!(encode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    Ok(())
}
