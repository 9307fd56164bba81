//! Python bindings. Configs cross the boundary as JSON strings in the same
//! format the CLI reads, so `json.dumps(dict)` works on the Python side.

use ctdg_core::bounds::{verify_bounds as run_verify, VerifySpec};
use ctdg_core::flow::{stream_reports, FlowMode};
use ctdg_core::metrics::{self, RankedQuery};
use ctdg_core::model::{init_params as core_init, ModelConfig, ModelParams, NodeStateTable};
use ctdg_core::numerics::{spectral_norm_default, DenseMatrix};
use ctdg_core::synth::{self, DatasetSpec};
use ctdg_core::train::{self, TaskData, TrainConfig};
use ctdg_core::{graph, CtdgError, EventLog as CoreLog, EventRecord, TemporalGraph};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: CtdgError) -> PyErr {
    match e {
        CtdgError::Io(_) => PyOSError::new_err(e.to_string()),
        CtdgError::NotConverged { .. } | CtdgError::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("bad {what}: {e}")))
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Chronological interaction log over a fixed node set.
#[pyclass(module = "ctdg", frozen, skip_from_py_object)]
#[derive(Clone)]
struct EventLog {
    inner: CoreLog,
}

#[pymethods]
impl EventLog {
    /// `events` holds `(src, dst, time)` tuples in time order.
    #[new]
    fn new(n: usize, events: Vec<(usize, usize, f64)>) -> PyResult<Self> {
        let ev = events.into_iter().map(|(s, d, t)| EventRecord::new(s, d, t)).collect();
        Ok(Self {
            inner: CoreLog::new(n, 0, ev).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, n=None))]
    fn read_csv(path: &str, n: Option<usize>) -> PyResult<Self> {
        let f = std::fs::File::open(path).map_err(|e| PyOSError::new_err(format!("{path}: {e}")))?;
        Ok(Self {
            inner: CoreLog::read_csv(f, n).map_err(err)?,
        })
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv_string()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    fn events(&self) -> Vec<(usize, usize, f64)> {
        self.inner.events().iter().map(|e| (e.src, e.dst, e.time)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("EventLog(n={}, events={})", self.inner.n(), self.inner.len())
    }
}

/// Generated log plus whatever supervision the generator produces.
#[pyclass(module = "ctdg", frozen)]
struct Dataset {
    inner: synth::Dataset,
}

#[pymethods]
impl Dataset {
    /// Generates from a spec such as `{"kind": "sbm", ...}`.
    #[staticmethod]
    fn generate(spec: &str) -> PyResult<Self> {
        let spec: DatasetSpec = parse(spec, "dataset spec")?;
        Ok(Self {
            inner: spec.generate().map_err(err)?,
        })
    }

    #[getter]
    fn log(&self) -> EventLog {
        EventLog {
            inner: self.inner.log.clone(),
        }
    }

    #[getter]
    fn has_ground_truth(&self) -> bool {
        self.inner.truth.is_some()
    }

    #[getter]
    fn has_labels(&self) -> bool {
        self.inner.labels.is_some()
    }

    fn __len__(&self) -> usize {
        self.inner.log.len()
    }
}

impl Dataset {
    fn task_data(&self) -> TaskData<'_> {
        TaskData {
            labels: self.inner.labels.as_deref(),
            truth: self.inner.truth.as_ref(),
        }
    }
}

/// Model config and parameters.
#[pyclass(module = "ctdg", frozen)]
struct Model {
    config: ModelConfig,
    params: ModelParams,
}

#[pymethods]
impl Model {
    /// Random initialization for a config JSON.
    #[new]
    #[pyo3(signature = (config, feature_dim=0, seed=0))]
    fn new(config: &str, feature_dim: usize, seed: u64) -> PyResult<Self> {
        let config: ModelConfig = parse(config, "model config")?;
        config.validate().map_err(err)?;
        let params = core_init(&config, feature_dim, seed);
        Ok(Self { config, params })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let (config, params) = ModelParams::from_json(text).map_err(err)?;
        Ok(Self { config, params })
    }

    fn to_json(&self) -> String {
        self.params.to_json(&self.config)
    }

    #[getter]
    fn config(&self) -> PyResult<String> {
        to_json(&self.config)
    }

    #[getter]
    fn layers(&self) -> usize {
        self.config.layers
    }

    /// Per-node displacement caused by one event, replaying memory from the
    /// start of the log.
    fn event_flow(&self, log: &EventLog, event: usize) -> PyResult<Vec<f64>> {
        let l = &log.inner;
        let g = TemporalGraph::from_events(l.n(), l.feature_dim(), l.events().to_vec()).map_err(err)?;
        let states = NodeStateTable::new(l.n(), self.config.hidden_dim, self.config.norm_cap);
        let mut r = stream_reports(&g, &[event], &self.params, &self.config, &states, FlowMode::Insert).map_err(err)?;
        Ok(r.pop().map(|r| r.displacement).unwrap_or_default())
    }
}

/// Trains on a dataset; returns the model and `(epoch, loss, val_metric)` rows.
#[pyfunction]
fn train_model(py: Python<'_>, data: &Dataset, model: &str, train: &str) -> PyResult<(Model, Vec<(usize, f64, f64)>)> {
    let mc: ModelConfig = parse(model, "model config")?;
    let tc: TrainConfig = parse(train, "train config")?;
    let out = py
        .detach(|| train::train(&data.inner.log, &mc, &tc, data.task_data()))
        .map_err(err)?;
    let trace = out.trace.iter().map(|r| (r.epoch, r.train_loss, r.val_metric)).collect();
    Ok((
        Model {
            config: out.config,
            params: out.params,
        },
        trace,
    ))
}

/// Test-span metric for the task named in the train config.
#[pyfunction]
fn evaluate(py: Python<'_>, data: &Dataset, model: &Model, train: &str) -> PyResult<f64> {
    let tc: TrainConfig = parse(train, "train config")?;
    py.detach(|| train::evaluate(&data.inner.log, &model.params, &model.config, &tc, data.task_data()))
        .map(|m| m.value)
        .map_err(err)
}

/// Runs random bound-verification trials; returns the summary as JSON.
#[pyfunction]
fn verify_bounds(py: Python<'_>, spec: &str) -> PyResult<String> {
    let spec: VerifySpec = parse(spec, "verify spec")?;
    let report = py.detach(|| run_verify(&spec)).map_err(err)?;
    to_json(&report.summary)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).map_err(err)
}

/// Each query is `(scores, relevances)` with exactly one relevant candidate.
#[pyfunction]
fn mrr(queries: Vec<(Vec<f64>, Vec<f64>)>) -> PyResult<f64> {
    let qs = queries
        .into_iter()
        .map(|(s, r)| RankedQuery::new(s, r))
        .collect::<Result<Vec<_>, _>>()
        .map_err(err)?;
    metrics::mrr(&qs).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (scores, relevances, k=None))]
fn ndcg(scores: Vec<f64>, relevances: Vec<f64>, k: Option<usize>) -> PyResult<f64> {
    let q = RankedQuery::new(scores, relevances).map_err(err)?;
    metrics::ndcg(&q, k).map_err(err)
}

#[pyfunction]
fn spectral_norm(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let m = DenseMatrix::from_rows(&rows).map_err(err)?;
    spectral_norm_default(&m).map_err(err)
}

/// Row sum of the L-th power of the normalized adjacency at time `t`.
#[pyfunction]
fn normalized_walk_sum(log: &EventLog, node: usize, layers: usize, t: f64) -> PyResult<f64> {
    let l = &log.inner;
    let g = TemporalGraph::from_events(l.n(), l.feature_dim(), l.events().to_vec()).map_err(err)?;
    graph::normalized_walk_sum(&g, node, layers, t).map_err(err)
}

#[pymodule]
pub fn ctdg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<EventLog>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(verify_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(mrr, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_norm, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_walk_sum, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
