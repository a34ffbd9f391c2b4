//! Python bindings for the inclusion-list laboratory.

use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use il_lab::consensus::leader_of as core_leader_of;
use il_lab::experiments;
use il_lab::metrics::{render_csv, render_markdown, MetricsReport};
use il_lab::scenario::{self, ScenarioConfig, ScenarioError, SweepGrid};
use il_lab::variants::Variant;

create_exception!(il_lab_py, ConfigError, PyValueError);
create_exception!(il_lab_py, SimulationError, PyRuntimeError);

fn scenario_err(e: ScenarioError) -> PyErr {
    match e {
        ScenarioError::Config(c) => ConfigError::new_err(c.to_string()),
        other => SimulationError::new_err(other.to_string()),
    }
}

fn variant(name: &str) -> PyResult<Variant> {
    name.parse().map_err(ConfigError::new_err)
}

/// A validated scenario configuration.
#[pyclass(name = "ScenarioConfig", module = "il_lab_py", from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: ScenarioConfig,
}

#[pymethods]
impl PyScenario {
    #[new]
    #[pyo3(signature = (json = "{}"))]
    fn new(json: &str) -> PyResult<Self> {
        Self::from_json(json)
    }

    #[staticmethod]
    fn from_json(json: &str) -> PyResult<Self> {
        let inner = ScenarioConfig::from_json(json).map_err(|e| ConfigError::new_err(e.to_string()))?;
        Ok(PyScenario { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant().name()
    }

    #[setter(variant)]
    fn set_variant(&mut self, name: &str) -> PyResult<()> {
        self.inner.protocol.variant = variant(name)?;
        Ok(())
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.net.n
    }

    #[getter]
    fn f(&self) -> usize {
        self.inner.net.f
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.net.seed
    }

    #[setter(seed)]
    fn set_seed(&mut self, seed: u64) {
        self.inner.net.seed = seed;
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(|e| ConfigError::new_err(e.to_string()))
    }

    /// Runs the scenario; with `out`, writes report files (and the trace).
    #[pyo3(signature = (out = None))]
    fn run(&self, py: Python<'_>, out: Option<std::path::PathBuf>) -> PyResult<PyReport> {
        let cfg = self.inner.clone();
        let outcome = py.detach(|| scenario::run_scenario(&cfg)).map_err(scenario_err)?;
        if let Some(dir) = out {
            scenario::write_outputs(&outcome, &dir).map_err(scenario_err)?;
        }
        Ok(PyReport {
            inner: outcome.report,
            trace_digest: outcome.log.trace_digest.iter().map(|b| format!("{b:02x}")).collect(),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "ScenarioConfig(name={:?}, variant={}, n={}, f={}, seed={})",
            self.inner.name,
            self.inner.variant(),
            self.inner.net.n,
            self.inner.net.f,
            self.inner.net.seed
        )
    }
}

/// Metrics of one completed run.
#[pyclass(name = "Report", module = "il_lab_py", frozen)]
struct PyReport {
    inner: MetricsReport,
    trace_digest: String,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn scenario(&self) -> &str {
        &self.inner.scenario
    }

    #[getter]
    fn variant(&self) -> Option<&'static str> {
        self.inner.variant.map(Variant::name)
    }

    #[getter]
    fn committed_epochs(&self) -> u64 {
        self.inner.committed_epochs
    }

    #[getter]
    fn committed_txs(&self) -> u64 {
        self.inner.committed_txs
    }

    #[getter]
    fn proposal_latency_rounds(&self) -> Option<u64> {
        self.inner.proposal_latency_rounds
    }

    #[getter]
    fn tx_latency_rounds(&self) -> Option<u64> {
        self.inner.tx_latency_rounds
    }

    #[getter]
    fn proposal_period_rounds(&self) -> Option<f64> {
        self.inner.proposal_period_rounds
    }

    #[getter]
    fn max_tx_censorship_rounds(&self) -> Option<u64> {
        self.inner.max_tx_censorship_rounds
    }

    #[getter]
    fn messages_total(&self) -> u64 {
        self.inner.messages_total
    }

    #[getter]
    fn bytes_total(&self) -> u64 {
        self.inner.bytes_total
    }

    #[getter]
    fn bytes_incremental_vs_plain(&self) -> Option<i64> {
        self.inner.bytes_incremental_vs_plain
    }

    #[getter]
    fn duplication_factor(&self) -> Option<f64> {
        self.inner.duplication_factor
    }

    #[getter]
    fn agreement_violations(&self) -> u64 {
        self.inner.agreement_violations
    }

    /// Hex digest of the delivery order.
    #[getter]
    fn trace_digest(&self) -> &str {
        &self.trace_digest
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| SimulationError::new_err(e.to_string()))
    }

    fn to_csv(&self) -> String {
        render_csv(std::slice::from_ref(&self.inner))
    }

    fn __repr__(&self) -> String {
        format!(
            "Report(scenario={:?}, committed_epochs={}, bytes_total={})",
            self.inner.scenario, self.inner.committed_epochs, self.inner.bytes_total
        )
    }
}

#[pyfunction]
fn leader_of(epoch: u64, n: usize) -> u32 {
    core_leader_of(epoch, n).0
}

/// Runs a sweep grid given as JSON and returns the markdown table.
#[pyfunction]
fn sweep_table(py: Python<'_>, grid_json: &str) -> PyResult<String> {
    let grid = SweepGrid::from_json(grid_json).map_err(|e| ConfigError::new_err(e.to_string()))?;
    let reports = py
        .detach(|| scenario::sweep(&grid))
        .map_err(|e| ConfigError::new_err(e.to_string()))?;
    Ok(render_markdown(&reports))
}

/// Bribed non-leaders needed to censor one epoch, or `None`.
#[pyfunction]
#[pyo3(signature = (variant_name, n, f, seed = 1))]
fn bribery_threshold(py: Python<'_>, variant_name: &str, n: usize, f: usize, seed: u64) -> PyResult<Option<usize>> {
    let v = variant(variant_name)?;
    let r = py
        .detach(|| experiments::bribery_sweep(v, n, f, seed))
        .map_err(scenario_err)?;
    Ok(r.threshold)
}

/// `(delay_rounds, delay_epochs)` under the strongest censoring attack.
#[pyfunction]
#[pyo3(signature = (variant_name, n, f, seed = 1))]
fn censorship_delay(py: Python<'_>, variant_name: &str, n: usize, f: usize, seed: u64) -> PyResult<(u64, u64)> {
    let v = variant(variant_name)?;
    let p = py
        .detach(|| experiments::max_censorship_probe(v, n, f, seed))
        .map_err(scenario_err)?;
    Ok((p.delay_rounds, p.delay_epochs))
}

/// Runs acceptance criteria; returns `(id, name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (ids = None))]
fn verify(py: Python<'_>, ids: Option<Vec<u8>>) -> Vec<(u8, String, bool, String)> {
    let results = py.detach(|| match ids {
        Some(ids) => il_lab::verify::verify(&ids),
        None => il_lab::verify::verify_all(),
    });
    results
        .into_iter()
        .map(|r| (r.id, r.name, r.passed, r.detail))
        .collect()
}

#[pymodule]
fn il_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(leader_of, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_table, m)?)?;
    m.add_function(wrap_pyfunction!(bribery_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(censorship_delay, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("SimulationError", m.py().get_type::<SimulationError>())?;
    m.add("VARIANTS", Variant::ALL.map(Variant::name).to_vec())?;
    Ok(())
}
