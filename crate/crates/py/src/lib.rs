//! Python bindings: `import hybrank`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use hybrank_core::corpus::{Corpus, Document, Qrels, Run, RunEntry};
use hybrank_core::dense::{load_embeddings, EmbeddingStore};
use hybrank_core::features::{
    build_query_features, cache_key, AnchorStrategy, FeatureCache, FeatureMode, FeatureOptions, QueryInput,
    SimTensor, Sources,
};
use hybrank_core::metrics::{evaluate as evaluate_run, Metric};
use hybrank_core::model::{param_count as count_params, rerank as rerank_list, HybRank, ModelConfig};
use hybrank_core::sparse::{tokenize as tokenize_text, Bm25Params, TermIndex};
use hybrank_core::train::{label_examples, QueryFeatures, TrainConfig, TrainOptions};
use hybrank_core::Error;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Applies keyword arguments through `set`, rejecting unknown keys.
fn apply_kwargs(
    kwargs: Option<&Bound<'_, PyDict>>,
    mut set: impl FnMut(&str, &str) -> hybrank_core::Result<bool>,
) -> PyResult<()> {
    let Some(kwargs) = kwargs else { return Ok(()) };
    for (k, v) in kwargs.iter() {
        let key: String = k.extract()?;
        let value = if v.is_instance_of::<PyBool>() {
            v.extract::<bool>()?.to_string()
        } else {
            v.str()?.to_string()
        };
        if !set(&key, &value).map_err(err)? {
            return Err(PyValueError::new_err(format!("unknown option {key:?}")));
        }
    }
    Ok(())
}

fn model_config(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<ModelConfig> {
    let mut cfg = ModelConfig::default();
    apply_kwargs(kwargs, |k, v| cfg.set(k, v))?;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    tokenize_text(text)
}

/// Temperature softmax followed by min-max scaling to [-1, 1].
#[pyfunction]
fn normalize_channel(values: Vec<f64>, t: f64) -> PyResult<Vec<f64>> {
    hybrank_core::features::normalize_channel(&values, t).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (scores, positives, tau = 0.07))]
fn contrastive_loss(scores: Vec<f64>, positives: Vec<usize>, tau: f64) -> PyResult<f64> {
    hybrank_core::train::contrastive_loss(&scores, &positives, tau).map_err(err)
}

/// Parameter count of a model configuration given as keyword arguments.
#[pyfunction]
#[pyo3(signature = (**config))]
fn param_count(config: Option<&Bound<'_, PyDict>>) -> PyResult<usize> {
    Ok(count_params(&model_config(config)?))
}

/// Sorts ids by descending score; ties keep input order.
#[pyfunction]
fn rerank(ids: Vec<String>, scores: Vec<f64>) -> PyResult<Vec<(String, f64)>> {
    let list = rerank_list(&ids, &scores).map_err(err)?;
    Ok(list.into_iter().map(|e| (e.doc_id, e.score)).collect())
}

/// `run` maps query ids to `(doc_id, score)` lists, `qrels` maps query ids
/// to `{doc_id: grade}`.
#[pyfunction]
#[pyo3(signature = (run, qrels, metrics = "r@1,r@5,r@10,r@20,r@50,mrr@10,ndcg@10"))]
fn evaluate(
    py: Python<'_>,
    run: BTreeMap<String, Vec<(String, f64)>>,
    qrels: BTreeMap<String, BTreeMap<String, u32>>,
    metrics: &str,
) -> PyResult<Py<PyDict>> {
    let metrics = Metric::parse_list(metrics).map_err(err)?;
    let mut r = Run::new();
    for (qid, list) in run {
        r.insert(qid, list.into_iter().map(|(d, s)| RunEntry::new(d, s)).collect())
            .map_err(err)?;
    }
    let mut q = Qrels::new();
    for (qid, docs) in qrels {
        for (doc, grade) in docs {
            q.insert(qid.clone(), doc, grade);
        }
    }
    let report = evaluate_run(&r, &q, &metrics);
    let out = PyDict::new(py);
    for (m, v) in &report.values {
        out.set_item(m.to_string(), v)?;
    }
    out.set_item("queries_evaluated", report.queries_evaluated)?;
    out.set_item("queries_skipped", report.queries_skipped)?;
    Ok(out.unbind())
}

/// BM25 term statistics of a corpus.
#[pyclass(name = "TermIndex", module = "hybrank")]
struct PyTermIndex(TermIndex);

#[pymethods]
impl PyTermIndex {
    /// Builds from `(id, title, text)` tuples.
    #[staticmethod]
    #[pyo3(signature = (documents, k1 = 0.9, b = 0.4))]
    fn build(documents: Vec<(String, String, String)>, k1: f64, b: f64) -> PyResult<Self> {
        let docs = documents
            .into_iter()
            .map(|(id, title, text)| Document { id, title, text })
            .collect();
        let corpus = Corpus::from_documents(docs).map_err(err)?;
        let params = Bm25Params::new(k1, b).map_err(err)?;
        Ok(PyTermIndex(TermIndex::build(&corpus, params).map_err(err)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTermIndex(TermIndex::load(&path).map_err(err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    /// BM25 score of `doc_id` for a query text.
    fn bm25(&self, query: &str, doc_id: &str) -> PyResult<f64> {
        let terms = self.0.query_terms(query);
        self.0.score_terms(&terms, doc_id, &self.0.params()).map_err(err)
    }

    #[getter]
    fn num_docs(&self) -> usize {
        self.0.num_docs()
    }

    #[getter]
    fn num_terms(&self) -> usize {
        self.0.num_terms()
    }

    #[getter]
    fn avg_len(&self) -> f64 {
        self.0.avg_len()
    }
}

/// Fixed-dimension vectors keyed by id.
#[pyclass(name = "EmbeddingStore", module = "hybrank")]
struct PyEmbeddingStore(EmbeddingStore);

#[pymethods]
impl PyEmbeddingStore {
    #[new]
    fn new(dim: usize) -> PyResult<Self> {
        Ok(PyEmbeddingStore(EmbeddingStore::new(dim).map_err(err)?))
    }

    #[staticmethod]
    fn load(vectors: PathBuf, ids: PathBuf) -> PyResult<Self> {
        Ok(PyEmbeddingStore(load_embeddings(&vectors, &ids).map_err(err)?))
    }

    fn save(&self, vectors: PathBuf, ids: PathBuf) -> PyResult<()> {
        self.0.save(&vectors, &ids).map_err(err)
    }

    fn insert(&mut self, id: String, vector: Vec<f32>) -> PyResult<()> {
        self.0.insert(id, &vector).map_err(err)
    }

    fn get(&self, id: &str) -> Option<Vec<f32>> {
        self.0.get(id).map(<[f32]>::to_vec)
    }

    fn dense_score(&self, a: &str, b: &str) -> PyResult<f64> {
        self.0.dense_score(a, b).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Normalized similarity features of one query's list.
#[pyclass(name = "Features", module = "hybrank")]
struct PyFeatures(FeatureCache);

#[pymethods]
impl PyFeatures {
    /// Builds features for a query. Query vectors are looked up as `q:<qid>`.
    #[staticmethod]
    #[pyo3(signature = (qid, text, passages, index = None, store = None, anchors = None, strategy = "top", mode = "hybrid", seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn build(
        qid: &str,
        text: &str,
        passages: Vec<String>,
        index: Option<PyRef<'_, PyTermIndex>>,
        store: Option<PyRef<'_, PyEmbeddingStore>>,
        anchors: Option<usize>,
        strategy: &str,
        mode: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let opts = FeatureOptions {
            anchors,
            strategy: match strategy {
                "top" => AnchorStrategy::Top,
                "random" => AnchorStrategy::Random { seed },
                other => return Err(PyValueError::new_err(format!("unknown anchor strategy {other:?}"))),
            },
            mode: mode.parse::<FeatureMode>().map_err(err)?,
            ..Default::default()
        };
        let sources = Sources {
            index: index.as_ref().map(|i| &i.0),
            store: store.as_ref().map(|s| &s.0),
        };
        let (anchor_set, features) =
            build_query_features(QueryInput { id: qid, text }, &passages, sources, &opts).map_err(err)?;
        Ok(PyFeatures(FeatureCache {
            qid: qid.to_string(),
            key: cache_key(qid, &passages, &opts),
            anchors: anchor_set,
            passages,
            features,
        }))
    }

    /// Wraps raw values shaped `[rows][anchors][2]`; row 0 is the query.
    #[staticmethod]
    #[pyo3(signature = (qid, passages, values, active = (true, true)))]
    fn from_values(qid: String, passages: Vec<String>, values: Vec<Vec<[f64; 2]>>, active: (bool, bool)) -> PyResult<Self> {
        let l = values.first().map_or(0, Vec::len);
        if values.iter().any(|r| r.len() != l) {
            return Err(PyValueError::new_err("ragged feature rows"));
        }
        let flat = values.iter().flatten().flatten().copied().collect();
        let features = SimTensor::from_values(values.len(), l, flat, [active.0, active.1]).map_err(err)?;
        let anchors = hybrank_core::features::AnchorSet::new((0..l).map(|j| format!("a{j}")).collect()).map_err(err)?;
        Ok(PyFeatures(FeatureCache {
            key: cache_key(&qid, &passages, &FeatureOptions::default()),
            qid,
            anchors,
            passages,
            features,
        }))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyFeatures(FeatureCache::load(&path).map_err(err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn qid(&self) -> String {
        self.0.qid.clone()
    }

    #[getter]
    fn passages(&self) -> Vec<String> {
        self.0.passages.clone()
    }

    #[getter]
    fn anchors(&self) -> Vec<String> {
        self.0.anchors.ids().to_vec()
    }

    /// `(rows, anchors, 2)` with rows = passages + 1.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.features.rows(), self.0.features.anchors(), 2)
    }

    #[getter]
    fn values(&self) -> Vec<Vec<[f64; 2]>> {
        let f = &self.0.features;
        (0..f.rows())
            .map(|r| (0..f.anchors()).map(|j| [f.get(r, j, 0), f.get(r, j, 1)]).collect())
            .collect()
    }
}

/// The reranking model.
#[pyclass(name = "HybRank", module = "hybrank")]
struct PyHybRank(HybRank);

#[pymethods]
impl PyHybRank {
    /// Seeded initialization; keyword arguments override model options.
    #[new]
    #[pyo3(signature = (seed = 0, **config))]
    fn new(seed: u64, config: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        Ok(PyHybRank(HybRank::new(model_config(config)?, seed).map_err(err)?))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyHybRank(HybRank::load(&path).map_err(err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    /// Relevance score of every passage, in list order.
    fn score(&self, features: &PyFeatures) -> PyResult<Vec<f64>> {
        self.0.score_all(&features.0.features).map_err(err)
    }

    /// Passages of `features` reordered by score.
    fn rerank(&self, features: &PyFeatures) -> PyResult<Vec<(String, f64)>> {
        let scores = self.score(features)?;
        rerank(features.0.passages.clone(), scores)
    }

    /// Trains a fresh model on `features` with labels from `qrels`.
    /// Keyword arguments set training options first, then model options.
    #[staticmethod]
    #[pyo3(signature = (features, qrels, **options))]
    fn fit(
        py: Python<'_>,
        features: Vec<PyRef<'_, PyFeatures>>,
        qrels: BTreeMap<String, BTreeMap<String, u32>>,
        options: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let mut tcfg = TrainConfig::default();
        let mut mcfg = ModelConfig::default();
        apply_kwargs(options, |k, v| Ok(tcfg.set(k, v)? || mcfg.set(k, v)?))?;
        mcfg.validate().map_err(err)?;
        let mut q = Qrels::new();
        for (qid, docs) in qrels {
            for (doc, grade) in docs {
                q.insert(qid.clone(), doc, grade);
            }
        }
        let items = features
            .iter()
            .map(|f| QueryFeatures::new(f.0.qid.clone(), f.0.passages.clone(), f.0.features.clone()))
            .collect::<hybrank_core::Result<Vec<_>>>()
            .map_err(err)?;
        let (examples, _) = label_examples(items, &q);
        let out = py
            .detach(|| hybrank_core::train::train(&mcfg, &tcfg, &examples, &TrainOptions::default()))
            .map_err(err)?;
        Ok(PyHybRank(out.model))
    }
}

#[pymodule]
fn hybrank(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_channel, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(rerank, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<PyTermIndex>()?;
    m.add_class::<PyEmbeddingStore>()?;
    m.add_class::<PyFeatures>()?;
    m.add_class::<PyHybRank>()?;
    Ok(())
}
