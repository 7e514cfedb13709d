//! Python bindings: knowledge graphs, representation queues, metrics,
//! corpus synthesis and a training session.

use std::path::PathBuf;

use kgreport::config::RunConfig;
use kgreport::graph::{self, BaseGraphSpec, FindingEntry, Relation, Triplet};
use kgreport::image::GrayImage;
use kgreport::metrics::{self, LabelLexicon};
use kgreport::pipeline;
use kgreport::queue;
use kgreport::synth::{self, CorpusSpec, Split};
use kgreport::train::{RunLog, Session};
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

pyo3::create_exception!(pykgreport, KgReportError, PyException);

fn err(e: kgreport::Error) -> PyErr {
    KgReportError::new_err(format!("{}: {e}", e.kind()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn triplets(raw: Vec<(String, String, String)>) -> PyResult<Vec<Triplet>> {
    raw.iter()
        .map(|(s, r, o)| Triplet::new(s, r.parse::<Relation>()?, o))
        .collect::<kgreport::Result<_>>()
        .map_err(err)
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Organ/finding graph with a global node.
#[pyclass(module = "pykgreport", skip_from_py_object)]
#[derive(Clone)]
struct KnowledgeGraph {
    inner: graph::KnowledgeGraph,
}

#[pymethods]
impl KnowledgeGraph {
    /// Base graph from organ names and `(finding, organ)` pairs.
    #[staticmethod]
    fn base(organs: Vec<String>, findings: Vec<(String, String)>) -> PyResult<Self> {
        let spec = BaseGraphSpec {
            organs: organs
                .iter()
                .map(|o| graph::EntityId::new(o))
                .collect::<kgreport::Result<_>>()
                .map_err(err)?,
            findings: findings
                .iter()
                .map(|(f, o)| {
                    Ok(FindingEntry {
                        name: graph::EntityId::new(f)?,
                        organ: graph::EntityId::new(o)?,
                    })
                })
                .collect::<kgreport::Result<_>>()
                .map_err(err)?,
        };
        let inner = graph::build_base_graph(&spec).map_err(err)?;
        Ok(KnowledgeGraph { inner })
    }

    #[staticmethod]
    fn chest_default() -> PyResult<Self> {
        let inner = graph::build_base_graph(&BaseGraphSpec::chest_default()).map_err(err)?;
        Ok(KnowledgeGraph { inner })
    }

    /// New graph with `(subject, relation, object)` triplets applied in order.
    #[pyo3(signature = (triplets, max_triplets = 90))]
    fn update(&self, triplets: Vec<(String, String, String)>, max_triplets: usize) -> PyResult<Self> {
        let ts = self::triplets(triplets)?;
        let inner = graph::update_graph(&self.inner, &ts, max_triplets).map_err(err)?;
        Ok(KnowledgeGraph { inner })
    }

    fn pad(&self, target: usize) -> PyResult<Self> {
        let inner = graph::pad_graph(&self.inner, target).map_err(err)?;
        Ok(KnowledgeGraph { inner })
    }

    /// `(name, level)` per node, in index order.
    fn nodes(&self) -> Vec<(String, String)> {
        self.inner
            .nodes()
            .iter()
            .map(|n| {
                let level = serde_json::to_value(n.level).ok();
                let level = level.as_ref().and_then(|v| v.as_str()).unwrap_or_default();
                (n.entity.as_str().to_string(), level.to_string())
            })
            .collect()
    }

    fn adjacency(&self) -> Vec<Vec<u8>> {
        self.inner.adjacency().to_vec()
    }

    fn has_edge(&self, a: &str, b: &str) -> PyResult<bool> {
        let pos = |s: &str| -> PyResult<Option<usize>> {
            Ok(self.inner.position(&graph::EntityId::new(s).map_err(err)?))
        };
        Ok(match (pos(a)?, pos(b)?) {
            (Some(i), Some(j)) => self.inner.edge(i, j),
            _ => false,
        })
    }

    fn real_len(&self) -> usize {
        self.inner.real_len()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "KnowledgeGraph(nodes={}, real={})",
            self.inner.len(),
            self.inner.real_len()
        )
    }
}

/// Fixed-capacity FIFO of normalized embeddings keyed by report id.
#[pyclass(module = "pykgreport")]
struct RepresentationQueue {
    inner: queue::RepresentationQueue,
}

#[pymethods]
impl RepresentationQueue {
    #[new]
    fn new(capacity: usize, dim: usize) -> PyResult<Self> {
        let inner = queue::RepresentationQueue::new(capacity, dim).map_err(err)?;
        Ok(RepresentationQueue { inner })
    }

    /// Appends `(embedding, report_id)` pairs, evicting the oldest entries.
    fn enqueue(&mut self, batch: Vec<(Vec<f64>, String)>) -> PyResult<()> {
        self.inner.enqueue(batch).map_err(err)
    }

    /// `(report_id, score)` for the `k` best entries, best first.
    fn top_k(&self, query: Vec<f64>, k: usize) -> PyResult<Vec<(String, f64)>> {
        let hits = self.inner.top_k(&query, k).map_err(err)?;
        Ok(hits.into_iter().map(|r| (r.report_id, r.score)).collect())
    }

    fn ids(&self) -> Vec<String> {
        self.inner.entries().map(|e| e.report_id.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction]
#[pyo3(signature = (candidates, references, smoothing = false))]
fn bleu4(candidates: Vec<String>, references: Vec<String>, smoothing: bool) -> PyResult<f64> {
    metrics::bleu4(&strs(&candidates), &strs(&references), smoothing).map_err(err)
}

#[pyfunction]
fn rouge_l(candidates: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    metrics::rouge_l(&strs(&candidates), &strs(&references)).map_err(err)
}

/// CIDEr with document frequencies from `corpus`, or from the references.
#[pyfunction]
#[pyo3(signature = (candidates, references, corpus = None))]
fn cider(candidates: Vec<String>, references: Vec<String>, corpus: Option<Vec<String>>) -> PyResult<f64> {
    let corpus = corpus.unwrap_or_else(|| references.clone());
    metrics::cider(&strs(&candidates), &strs(&references), &strs(&corpus)).map_err(err)
}

/// BLEU-4, ROUGE-L, CIDEr and clinical-efficacy scores as a dict.
#[pyfunction]
#[pyo3(signature = (candidates, references, smoothing = false))]
fn evaluate_texts<'py>(
    py: Python<'py>,
    candidates: Vec<String>,
    references: Vec<String>,
    smoothing: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let report = metrics::evaluate_texts(
        &strs(&candidates),
        &strs(&references),
        &LabelLexicon::chexpert_like(),
        smoothing,
    )
    .map_err(err)?;
    to_py(py, &report)
}

/// Writes a synthetic corpus with knowledge base and vocabulary to `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, n, seed = 0))]
fn synthesize(out_dir: PathBuf, n: usize, seed: u64) -> PyResult<String> {
    let paths = synth::write_dataset(&CorpusSpec::chest_default(), n, seed, &out_dir).map_err(err)?;
    Ok(paths.root.display().to_string())
}

/// Writes the desk-scale run configuration to `path`.
#[pyfunction]
#[pyo3(signature = (path, data_dir, output_dir, epochs = 30, seed = 0))]
fn write_desk_config(
    path: PathBuf,
    data_dir: PathBuf,
    output_dir: PathBuf,
    epochs: usize,
    seed: u64,
) -> PyResult<()> {
    let cfg = RunConfig {
        epochs,
        seed,
        ..RunConfig::desk(data_dir, output_dir)
    };
    cfg.save(&path).map_err(err)
}

/// Training session built from a JSON run configuration.
#[pyclass(module = "pykgreport", unsendable)]
struct Trainer {
    session: Session,
    log: RunLog,
}

#[pymethods]
impl Trainer {
    /// Fresh session, or one restored from `checkpoint`.
    #[new]
    #[pyo3(signature = (config, checkpoint = None))]
    fn new(config: PathBuf, checkpoint: Option<PathBuf>) -> PyResult<Self> {
        let cfg = RunConfig::load(&config).map_err(err)?;
        let session = match checkpoint {
            Some(p) => Session::resume(&cfg, &p),
            None => Session::new(&cfg),
        }
        .map_err(err)?;
        Ok(Trainer {
            session,
            log: RunLog::default(),
        })
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.session.epoch
    }

    #[getter]
    fn step(&self) -> u64 {
        self.session.step
    }

    /// One pass over the training split; returns the mean loss breakdown.
    fn train_epoch<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let loss = self.session.train_epoch(&mut self.log).map_err(err)?;
        to_py(py, &loss)
    }

    /// Total loss of every step taken so far through `train_epoch`.
    fn loss_trace(&self) -> Vec<f64> {
        self.log.loss_trace()
    }

    /// Trains the remaining epochs with validation and checkpointing.
    fn run<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let log = self.session.run().map_err(err)?;
        let summary = serde_json::json!({
            "epochs": self.session.epoch,
            "steps": self.session.step,
            "best_epoch": log.best_epoch,
            "best_cider": log.best_cider,
            "loss_trace": log.loss_trace(),
        });
        to_py(py, &summary)
    }

    #[pyo3(signature = (split = "val"))]
    fn evaluate<'py>(&self, py: Python<'py>, split: &str) -> PyResult<Bound<'py, PyAny>> {
        let split: Split = split.parse().map_err(err)?;
        let ev = self.session.evaluate(split).map_err(err)?;
        to_py(py, &ev.metrics)
    }

    /// Report for a PGM image.
    fn generate(&self, image: PathBuf) -> PyResult<String> {
        let img = GrayImage::load_pgm(&image).map_err(err)?;
        let s = &self.session;
        let g = pipeline::generate(
            &s.state,
            &s.res,
            &s.settings,
            &s.queues,
            &[&img],
            s.cfg.max_generation_len,
            s.cfg.beam_width,
        )
        .map_err(err)?;
        Ok(g.text)
    }

    /// The dynamic graph built for a PGM image, as a dict.
    fn inspect_graph<'py>(&self, py: Python<'py>, image: PathBuf) -> PyResult<Bound<'py, PyAny>> {
        let img = GrayImage::load_pgm(&image).map_err(err)?;
        let s = &self.session;
        let report =
            pipeline::inspect_graph(&s.state, &s.res, &s.settings, &s.queues, &[&img]).map_err(err)?;
        to_py(py, &report)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.session.checkpoint().save(&path).map_err(err)
    }
}

#[pymodule]
mod pykgreport {
    #[pymodule_export]
    use super::{
        bleu4, cider, evaluate_texts, rouge_l, synthesize, write_desk_config, KgReportError, KnowledgeGraph,
        RepresentationQueue, Trainer,
    };
}
