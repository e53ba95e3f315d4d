//! Python bindings: datasets, configs, training runs, checkpoints and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

use reciperec_core::eval::{metrics_at_k, rank_candidates, RankedList, MAX_K};
use reciperec_core::graph::io::load_dir;
use reciperec_core::graph::split::InteractionSplit;
use reciperec_core::params::Checkpoint;
use reciperec_core::run::{self, TrainOptions};
use reciperec_core::synth::{self, SyntheticSpec};
use reciperec_core::{selfcheck, HeteroGraph, NodeType, RecipeRec, RelationType};

fn err(e: reciperec_core::Error) -> PyErr {
    match e {
        reciperec_core::Error::Config(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn node_type(name: &str) -> PyResult<NodeType> {
    NodeType::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown node type `{name}`")))
}

fn relation(name: &str) -> PyResult<RelationType> {
    RelationType::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown relation `{name}`")))
}

fn json_loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Training configuration; keyword arguments override the defaults.
#[pyclass(name = "TrainConfig", module = "reciperec", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: reciperec_core::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(py: Python<'_>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let value = json_loads(py, &reciperec_core::TrainConfig::default().to_json())?;
        if let Some(o) = overrides {
            value.call_method1("update", (o,))?;
        }
        let text: String = py.import("json")?.call_method1("dumps", (&value,))?.extract()?;
        Self::from_json(&text)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner = reciperec_core::TrainConfig::from_json(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_loads(py, &self.inner.to_json())
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({})", self.inner.to_json().replace('\n', ""))
    }
}

/// A loaded heterogeneous graph.
#[pyclass(name = "Graph", module = "reciperec")]
struct PyGraph {
    inner: HeteroGraph,
}

#[pymethods]
impl PyGraph {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_dir(&dir).map_err(err)?,
        })
    }

    /// Node counts keyed by type name.
    fn counts(&self) -> Vec<(String, usize)> {
        NodeType::ALL
            .iter()
            .map(|t| (t.name().to_string(), self.inner.count(*t)))
            .collect()
    }

    fn edge_count(&self, relation_name: &str) -> PyResult<usize> {
        Ok(self.inner.edge_count(relation(relation_name)?))
    }

    /// `(neighbour id, weight)` pairs in ascending id order.
    fn neighbors(&self, node_type_name: &str, node: usize, relation_name: &str) -> PyResult<Vec<(usize, f64)>> {
        self.inner
            .neighbors(node_type(node_type_name)?, node, relation(relation_name)?)
            .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Graph(counts={:?})", self.inner.counts())
    }
}

/// A model restored from a checkpoint, encoding the graph it was trained on.
#[pyclass(name = "Model", module = "reciperec")]
struct PyModel {
    graph: HeteroGraph,
    model: RecipeRec,
}

#[pymethods]
impl PyModel {
    /// With a split file the test interactions are removed before encoding.
    #[staticmethod]
    #[pyo3(signature = (checkpoint, data_dir, split=None))]
    fn from_checkpoint(checkpoint: PathBuf, data_dir: PathBuf, split: Option<PathBuf>) -> PyResult<Self> {
        let graph = load_dir(&data_dir).map_err(err)?;
        let graph = match split {
            Some(p) => InteractionSplit::load(&p, &graph)
                .and_then(|s| s.train_graph(&graph))
                .map_err(err)?,
            None => graph,
        };
        let ckpt = Checkpoint::load(&checkpoint).map_err(err)?;
        let model = run::model_from_checkpoint(&graph, &ckpt).map_err(err)?;
        Ok(Self { graph, model })
    }

    /// Freshly initialised model for `graph`.
    #[new]
    fn new(graph: &PyGraph, config: &PyTrainConfig) -> PyResult<Self> {
        let model = RecipeRec::new(&graph.inner, &config.inner).map_err(err)?;
        Ok(Self {
            graph: graph.inner.clone(),
            model,
        })
    }

    /// Final embeddings of one node type as a list of rows.
    fn embeddings(&self, node_type_name: &str) -> PyResult<Vec<Vec<f64>>> {
        let t = node_type(node_type_name)?;
        let emb = self.model.embeddings(&self.graph.full_view()).map_err(err)?;
        let m = emb.of(t);
        Ok((0..m.rows()).map(|i| m.row(i).to_vec()).collect())
    }

    /// Predicted preference of `user` for each recipe.
    fn score(&self, user: usize, recipes: Vec<usize>) -> PyResult<Vec<f64>> {
        let emb = self.model.embeddings(&self.graph.full_view()).map_err(err)?;
        let pairs: Vec<(usize, usize)> = recipes.iter().map(|&r| (user, r)).collect();
        self.model.score_pairs(&emb, &pairs).map_err(err)
    }

    fn num_parameters(&self) -> usize {
        self.model.store().num_values()
    }
}

/// Writes a planted-cluster synthetic dataset and returns its node counts.
#[pyfunction]
#[pyo3(signature = (out_dir, users=50, recipes=200, ingredients=30, clusters=4, seed=7))]
fn generate_synthetic(
    out_dir: PathBuf,
    users: usize,
    recipes: usize,
    ingredients: usize,
    clusters: usize,
    seed: u64,
) -> PyResult<[usize; 3]> {
    let spec = SyntheticSpec {
        users,
        recipes,
        ingredients,
        clusters,
        seed,
        ..SyntheticSpec::default()
    };
    Ok(synth::write(&spec, &out_dir).map_err(err)?.counts())
}

/// Runs split, training and evaluation; returns the run manifest as a dict.
#[pyfunction]
#[pyo3(signature = (config, data_dir, out_dir, resume=None, split=None))]
fn train<'py>(
    py: Python<'py>,
    config: &PyTrainConfig,
    data_dir: PathBuf,
    out_dir: PathBuf,
    resume: Option<PathBuf>,
    split: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.inner.clone();
    py.detach(|| run::train_run(&cfg, &data_dir, &out_dir, &TrainOptions { resume, split }))
        .map_err(err)?;
    let text = std::fs::read_to_string(out_dir.join(run::MANIFEST_FILE))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_loads(py, &text)
}

/// Evaluates a checkpoint; returns the metric report as a dict.
#[pyfunction]
#[pyo3(signature = (checkpoint, data_dir, split, out_dir=None))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    data_dir: PathBuf,
    split: PathBuf,
    out_dir: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let report = py
        .detach(|| run::eval_run(&checkpoint, &data_dir, &split, out_dir.as_deref()))
        .map_err(err)?;
    json_loads(py, &report.to_json())
}

/// 1-based rank of `positive` among `candidates`, ties broken by ascending id.
#[pyfunction]
fn rank_of(positive: usize, candidates: Vec<usize>, scores: Vec<f64>) -> PyResult<usize> {
    Ok(rank_candidates(0, positive, &candidates, &scores).map_err(err)?.rank)
}

/// Precision, HR, NDCG and MAP at `k` from 1-based ranks of single relevant items.
#[pyfunction]
#[pyo3(signature = (ranks, k=MAX_K))]
fn metrics_from_ranks(ranks: Vec<usize>, k: usize) -> PyResult<(f64, f64, f64, f64)> {
    let len = ranks.iter().copied().max().unwrap_or(1).max(k);
    let lists: Vec<RankedList> = ranks
        .iter()
        .enumerate()
        .map(|(user, &rank)| {
            if rank == 0 {
                return Err(PyValueError::new_err("ranks are 1-based"));
            }
            Ok(RankedList {
                user,
                candidates: (0..len).collect(),
                positive: rank - 1,
                rank,
            })
        })
        .collect::<PyResult<_>>()?;
    let m = metrics_at_k(&lists, k).map_err(err)?;
    Ok((m.precision, m.hr, m.ndcg, m.map))
}

/// Runs the built-in checks; returns `(all passed, printable report)`.
#[pyfunction]
fn self_check(py: Python<'_>) -> (bool, String) {
    let report = py.detach(selfcheck::run);
    (report.passed(), report.to_string())
}

#[pymodule]
fn reciperec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(rank_of, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_from_ranks, m)?)?;
    m.add_function(wrap_pyfunction!(self_check, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
