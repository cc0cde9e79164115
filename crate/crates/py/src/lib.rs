//! Python bindings: corpora, training, evaluation, gradient checks and embeddings.
//!
//! Structured results cross the boundary as JSON and come back as plain
//! dicts and lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use strata_core::autodiff::Scalar;
use strata_core::corpus::{generate_synthetic, Corpus, GeneratorConfig};
use strata_core::encoders::{ClipInput, Embedding, TextInput};
use strata_core::evalsuite::{evaluate as run_eval, export_embeddings, EvalOptions, ExportLevel};
use strata_core::gradients::check_everything;
use strata_core::trainer::{run_schedule, Checkpoint, Mode, TrainConfig};

create_exception!(strata, StrataError, PyException);

fn err(e: strata_core::Error) -> PyErr {
    StrataError::new_err(format!("{}: {e}", e.kind()))
}

fn json_err(e: serde_json::Error) -> PyErr {
    StrataError::new_err(format!("config: {e}"))
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (s,))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` with keyword overrides applied; nested configs take dicts.
fn with_overrides<T: Serialize + DeserializeOwned>(py: Python<'_>, base: T, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(kwargs) = kwargs else { return Ok(base) };
    let mut value = serde_json::to_value(&base).map_err(json_err)?;
    let s: String = py.import("json")?.call_method1("dumps", (kwargs,))?.extract()?;
    merge(&mut value, serde_json::from_str(&s).map_err(json_err)?);
    serde_json::from_value(value).map_err(json_err)
}

fn rows(embs: Vec<Embedding>) -> Vec<Vec<f64>> {
    embs.into_iter().map(|e| e.values().iter().map(|&x| x as f64).collect()).collect()
}

/// A corpus of videos, each a sequence of clips with narrations plus a summary.
#[pyclass(name = "Corpus", module = "strata", frozen)]
struct PyCorpus {
    inner: Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<PyCorpus> {
        let inner = py.detach(|| Corpus::load(&path)).map_err(err)?;
        Ok(PyCorpus { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn split(&self) -> String {
        self.inner.manifest.split.clone()
    }

    #[getter]
    fn manifest_hash(&self) -> String {
        self.inner.manifest.content_hash()
    }

    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.manifest)
    }

    /// One video record as a dict.
    fn video<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyAny>> {
        let v = self
            .inner
            .videos
            .get(index)
            .ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(format!("video {index} out of range")))?;
        to_py(py, v)
    }

    fn __repr__(&self) -> String {
        format!("Corpus(split={:?}, videos={})", self.inner.manifest.split, self.inner.len())
    }
}

/// Trained parameters together with the config that produced them.
#[pyclass(name = "Checkpoint", module = "strata", frozen)]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<PyCheckpoint> {
        Ok(PyCheckpoint {
            inner: Checkpoint::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn step(&self) -> usize {
        self.inner.step
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.config.mode.name()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    /// Unit-norm text embeddings for token-id sequences.
    fn embed_texts(&self, py: Python<'_>, texts: Vec<Vec<u32>>) -> PyResult<Vec<Vec<f64>>> {
        let model = self.inner.model().map_err(err)?;
        let inputs: Vec<TextInput> = texts.into_iter().map(TextInput::new).collect();
        let embs = py
            .detach(|| model.embed_texts(&inputs.iter().collect::<Vec<_>>()))
            .map_err(err)?;
        Ok(rows(embs))
    }

    /// Unit-norm clip embeddings; each clip is a list of frame feature vectors.
    fn embed_clips(&self, py: Python<'_>, clips: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let model = self.inner.model().map_err(err)?;
        let inputs: Vec<ClipInput> = clips
            .into_iter()
            .map(|frames| ClipInput::new(frames.into_iter().map(|f| f.into_iter().map(|x| x as Scalar).collect()).collect()))
            .collect();
        let embs = py
            .detach(|| model.embed_clips(&inputs.iter().collect::<Vec<_>>()))
            .map_err(err)?;
        Ok(rows(embs))
    }

    /// Rows of `{id, level, label, vector}` for every clip ("child") or video ("parent").
    #[pyo3(signature = (corpus, level = "parent"))]
    fn export<'py>(&self, py: Python<'py>, corpus: &PyCorpus, level: &str) -> PyResult<Bound<'py, PyAny>> {
        let level = match level {
            "child" => ExportLevel::Child,
            "parent" => ExportLevel::Parent,
            other => return Err(StrataError::new_err(format!("config: unknown export level {other:?}"))),
        };
        let model = self.inner.model().map_err(err)?;
        let cfg = &self.inner.config;
        let rows = py
            .detach(|| export_embeddings(&model, &corpus.inner, level, cfg.k, cfg.mode.aggregator_kind()))
            .map_err(err)?;
        to_py(py, &rows)
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint(mode={:?}, step={})", self.inner.config.mode.name(), self.inner.step)
    }
}

/// Generate a synthetic (train, eval) corpus pair; keywords override generator settings.
#[pyfunction]
#[pyo3(signature = (seed = 0, **config))]
fn generate(py: Python<'_>, seed: u64, config: Option<&Bound<'_, PyDict>>) -> PyResult<(PyCorpus, PyCorpus)> {
    let cfg = with_overrides(py, GeneratorConfig::default(), config)?;
    let c = py.detach(|| generate_synthetic(&cfg, seed)).map_err(err)?;
    Ok((PyCorpus { inner: c.train }, PyCorpus { inner: c.eval }))
}

/// Train one mode on `corpus`. Returns the final checkpoint and per-step metrics.
/// `wo-joint` needs `init`, a child-only checkpoint.
#[pyfunction]
#[pyo3(signature = (corpus, mode = "hier-sa", init = None, **config))]
fn train<'py>(
    py: Python<'py>,
    corpus: &PyCorpus,
    mode: &str,
    init: Option<&PyCheckpoint>,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyCheckpoint, Bound<'py, PyAny>)> {
    let base = TrainConfig {
        mode: Mode::parse(mode).map_err(err)?,
        ..TrainConfig::default()
    };
    let cfg = with_overrides(py, base, config)?;
    let pretrained = init.map(|c| &c.inner.params);
    let (ck, metrics) = py.detach(|| run_schedule(&cfg, &corpus.inner, pretrained)).map_err(err)?;
    let metrics = to_py(py, &metrics)?;
    Ok((PyCheckpoint { inner: ck }, metrics))
}

/// Every evaluation protocol; keywords override evaluation options
/// (`items`, `k`, `seed`, `extended`, `probe`).
#[pyfunction]
#[pyo3(signature = (checkpoint, corpus, train_corpus = None, **options))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: &PyCheckpoint,
    corpus: &PyCorpus,
    train_corpus: Option<&PyCorpus>,
    options: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = with_overrides(py, EvalOptions::default(), options)?;
    let model = checkpoint.inner.model().map_err(err)?;
    let kind = checkpoint.inner.config.mode.aggregator_kind();
    let summary = py
        .detach(|| run_eval(&model, kind, &corpus.inner, train_corpus.map(|c| &c.inner), &opts))
        .map_err(err)?;
    to_py(py, &summary)
}

/// Finite-difference gradient checks; one dict per component.
#[pyfunction]
#[pyo3(signature = (seeds = strata_core::gradients::OP_SEEDS))]
fn gradcheck<'py>(py: Python<'py>, seeds: u64) -> PyResult<Bound<'py, PyAny>> {
    let reports = py.detach(|| check_everything(seeds)).map_err(err)?;
    to_py(py, &reports)
}

#[pymodule]
fn strata(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StrataError", m.py().get_type::<StrataError>())?;
    m.add("MODES", Mode::ALL.iter().map(|md| md.name()).collect::<Vec<_>>())?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
