//! Python bindings: corpora, episodes, the tiny encoder, prototype helpers,
//! and the train / evaluate pipeline.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use protoner::config::RunConfig;
use protoner::corpus::{self, CorpusFormat, Sentence, SyntheticSpec};
use protoner::encoder::{init_encoder, EncoderConfig, EncoderState, TokenEncoder};
use protoner::episodes::{self, EpisodeParams};
use protoner::objective::{self, MmdConfig};
use protoner::pipeline;
use protoner::protonet;

fn py_err(e: protoner::Error) -> PyErr {
    match e {
        protoner::Error::Io(_) | protoner::Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn sentence(tokens: Vec<String>, labels: Option<Vec<String>>) -> PyResult<Sentence> {
    let labels = labels.unwrap_or_else(|| vec![corpus::OUTSIDE.to_string(); tokens.len()]);
    Sentence::new(tokens, labels).map_err(py_err)
}

#[pyclass(name = "Corpus", module = "protoner_py", from_py_object)]
#[derive(Clone)]
struct PyCorpus {
    inner: corpus::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[new]
    fn new(sentences: Vec<(Vec<String>, Vec<String>)>) -> PyResult<Self> {
        let sents = sentences
            .into_iter()
            .map(|(t, l)| sentence(t, Some(l)))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(PyCorpus {
            inner: corpus::Corpus::new(sents),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        corpus::parse_corpus(path, CorpusFormat::FewNerd)
            .map(|inner| PyCorpus { inner })
            .map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        corpus::write_corpus(&self.inner, path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.sentences.len()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.label_set.iter().cloned().collect()
    }

    fn sentence(&self, i: usize) -> PyResult<(Vec<String>, Vec<String>)> {
        self.inner
            .sentences
            .get(i)
            .map(|s| (s.tokens.clone(), s.labels.clone()))
            .ok_or_else(|| PyValueError::new_err(format!("sentence index {i} out of range")))
    }

    /// `(class_counts, sentences, tokens)`
    fn stats(&self) -> (BTreeMap<String, usize>, usize, usize) {
        let s = corpus::corpus_stats(&self.inner);
        (s.class_counts, s.sentences, s.tokens)
    }
}

/// Returns `(train, test_confounded, test_anticonfounded)`.
#[pyfunction]
#[pyo3(signature = (rho=0.8, classes=5, seed=0, sentences=1000, entities=4, context_vocab=6))]
fn synth(
    rho: f64,
    classes: usize,
    seed: u64,
    sentences: usize,
    entities: usize,
    context_vocab: usize,
) -> PyResult<(PyCorpus, PyCorpus, PyCorpus)> {
    let c = corpus::synth_confounded_corpus(&SyntheticSpec {
        n_classes: classes,
        entities_per_class: entities,
        context_vocab_per_class: context_vocab,
        rho,
        sentences,
        seed,
    })
    .map_err(py_err)?;
    let wrap = |inner| PyCorpus { inner };
    Ok((wrap(c.train), wrap(c.test_confounded), wrap(c.test_anticonfounded)))
}

#[pyfunction]
fn extract_spans(labels: Vec<String>) -> Vec<(usize, usize, String)> {
    corpus::spans_from_labels(&labels)
        .into_iter()
        .map(|s| (s.start, s.end, s.label))
        .collect()
}

#[pyclass(name = "Episode", module = "protoner_py", skip_from_py_object)]
struct PyEpisode {
    inner: episodes::Episode,
}

#[pymethods]
impl PyEpisode {
    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    #[getter]
    fn support(&self) -> Vec<(Vec<String>, Vec<String>)> {
        self.inner.support.iter().map(|s| (s.tokens.clone(), s.labels.clone())).collect()
    }

    #[getter]
    fn query(&self) -> Vec<(Vec<String>, Vec<String>)> {
        self.inner.query.iter().map(|s| (s.tokens.clone(), s.labels.clone())).collect()
    }

    /// Constraint violations; empty for a valid episode.
    fn validate(&self) -> Vec<String> {
        episodes::validate_episode(&self.inner)
    }
}

#[pyfunction]
#[pyo3(signature = (corpus, way=5, shot_lo=1, shot_hi=2, query=1, seed=0))]
fn sample_episode(
    corpus: &PyCorpus,
    way: usize,
    shot_lo: usize,
    shot_hi: usize,
    query: usize,
    seed: u64,
) -> PyResult<PyEpisode> {
    let index = episodes::build_class_index(&corpus.inner);
    let params = EpisodeParams {
        way,
        shot_lo,
        shot_hi,
        query_per_class: query,
    };
    episodes::sample_episode(&corpus.inner, &index, &params, seed)
        .map(|inner| PyEpisode { inner })
        .map_err(py_err)
}

#[pyclass(name = "Encoder", module = "protoner_py", skip_from_py_object)]
struct PyEncoder {
    inner: EncoderState,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (dim=32, max_len=32, buckets=4096, window=2, seed=0))]
    fn new(dim: usize, max_len: usize, buckets: usize, window: usize, seed: u64) -> PyResult<Self> {
        let cfg = EncoderConfig {
            dim,
            max_len,
            vocab_hash_buckets: buckets,
            context_window: window,
            seed,
            ..EncoderConfig::default()
        };
        init_encoder(&cfg).map(|inner| PyEncoder { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        EncoderState::load(path).map(|inner| PyEncoder { inner }).map_err(py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    /// Evaluation-mode token vectors.
    fn encode(&self, tokens: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let s = sentence(tokens, None)?;
        self.inner.encode(&s).map(|e| e.rows).map_err(py_err)
    }
}

#[pyfunction]
fn sq_euclid(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    protonet::sq_euclid(&a, &b).map_err(py_err)
}

#[pyfunction]
fn class_prototypes(groups: BTreeMap<String, Vec<Vec<f64>>>) -> PyResult<BTreeMap<String, Vec<f64>>> {
    protonet::class_prototypes(&groups).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (query, supports, tau=1.0))]
fn reweight_supports(query: Vec<f64>, supports: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<f64>> {
    protonet::reweight_supports(&query, &supports, tau).map_err(py_err)
}

/// Squared MMD; fixed Gaussian bandwidths when given, median heuristic otherwise.
#[pyfunction]
#[pyo3(signature = (source, target, bandwidths=None))]
fn mmd(source: Vec<Vec<f64>>, target: Vec<Vec<f64>>, bandwidths: Option<Vec<f64>>) -> PyResult<f64> {
    let cfg = bandwidths.map_or_else(MmdConfig::default, MmdConfig::fixed);
    objective::mmd(&source, &target, &cfg).map_err(py_err)
}

#[pyclass(name = "RunConfig", module = "protoner_py", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults, then `key=value` overrides from keyword arguments.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<BTreeMap<String, String>>) -> PyResult<Self> {
        let text: String = kwargs
            .unwrap_or_default()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        RunConfig::parse(&text).map(|inner| PyRunConfig { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        RunConfig::load(path).map(|inner| PyRunConfig { inner }).map_err(py_err)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)?;
        self.inner.validate().map_err(py_err)
    }

    fn render(&self) -> String {
        self.inner.render()
    }
}

#[pyclass(name = "Model", module = "protoner_py", skip_from_py_object)]
struct PyModel {
    inner: pipeline::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        pipeline::load_checkpoint(dir).map(|inner| PyModel { inner }).map_err(py_err)
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        pipeline::save_checkpoint(&self.inner, dir).map_err(py_err)
    }

    #[getter]
    fn memory_classes(&self) -> Vec<String> {
        self.inner.memory.protos.keys().cloned().collect()
    }

    fn encode(&self, tokens: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let s = sentence(tokens, None)?;
        self.inner.encoder.encode(&s).map(|e| e.rows).map_err(py_err)
    }
}

/// Returns the trained model and the metric log as JSON lines.
#[pyfunction]
#[pyo3(signature = (config, train_corpus, test_corpus=None))]
fn train(
    py: Python<'_>,
    config: &PyRunConfig,
    train_corpus: &PyCorpus,
    test_corpus: Option<&PyCorpus>,
) -> PyResult<(PyModel, Vec<String>)> {
    let (cfg, tr, te) = (config.inner.clone(), train_corpus.inner.clone(), test_corpus.map(|c| c.inner.clone()));
    let out = py
        .detach(move || pipeline::train(&cfg, &tr, te.as_ref()))
        .map_err(py_err)?;
    let log = out
        .log
        .iter()
        .map(|r| serde_json::to_string(r).map_err(|e| PyRuntimeError::new_err(e.to_string())))
        .collect::<PyResult<Vec<_>>>()?;
    Ok((PyModel { inner: out.model }, log))
}

/// Evaluation report as a JSON string.
#[pyfunction]
fn evaluate(py: Python<'_>, model: &PyModel, config: &PyRunConfig, corpus: &PyCorpus) -> PyResult<String> {
    let rep = py
        .detach(|| pipeline::evaluate(&model.inner, &config.inner, &corpus.inner))
        .map_err(py_err)?;
    serde_json::to_string(&rep).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn protoner_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyEpisode>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(extract_spans, m)?)?;
    m.add_function(wrap_pyfunction!(sample_episode, m)?)?;
    m.add_function(wrap_pyfunction!(sq_euclid, m)?)?;
    m.add_function(wrap_pyfunction!(class_prototypes, m)?)?;
    m.add_function(wrap_pyfunction!(reweight_supports, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
