//! `hat_py`: model construction, checkpoints, generation, training,
//! metrics and heatmaps from Python.

use std::path::PathBuf;

use hat_core::commands::{decode_texts, load_config, param_count};
use hat_core::eval::{evaluate as eval_report, Metric};
use hat_core::generation::{generate as beam_generate, GenConfig};
use hat_core::model::{
    encode_output, load_checkpoint, save_checkpoint, HatConfig, HatParameters, ModelMode,
};
use hat_core::text::dataset::read_encoded;
use hat_core::text::{
    encode_document, segment_sentences, Batch, EncodedExample, Vocabulary as CoreVocab, PAD_ID,
};
use hat_core::training::{train as run_train, OptimizerConfig, TrainOptions};
use hat_core::viz::{aggregate, AttentionTrace};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(hat_py, HatError, PyException);

fn err(e: hat_core::Error) -> PyErr {
    HatError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| HatError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "HatConfig", module = "hat_py", frozen)]
struct PyHatConfig {
    inner: HatConfig,
}

#[pymethods]
impl PyHatConfig {
    /// Two-layer d=8 configuration.
    #[staticmethod]
    #[pyo3(signature = (mode = "hat", vocab_size = 64))]
    fn tiny(mode: &str, vocab_size: usize) -> PyResult<Self> {
        let mode: ModelMode = mode.parse().map_err(err)?;
        Ok(PyHatConfig {
            inner: HatConfig::tiny(mode, vocab_size),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyHatConfig {
            inner: HatConfig::load(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: HatConfig =
            serde_json::from_str(text).map_err(|e| HatError::new_err(e.to_string()))?;
        let inner = inner.normalized();
        inner.validate().map_err(err)?;
        Ok(PyHatConfig { inner })
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    /// Breakdown for this configuration and its plain counterpart.
    fn param_count<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &param_count(&self.inner))
    }

    fn as_plain(&self) -> Self {
        PyHatConfig {
            inner: self.inner.as_plain(),
        }
    }

    #[getter]
    fn mode(&self) -> String {
        format!("{:?}", self.inner.mode)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "Vocabulary", module = "hat_py", frozen)]
struct PyVocabulary {
    inner: CoreVocab,
}

#[pymethods]
impl PyVocabulary {
    #[staticmethod]
    #[pyo3(signature = (texts, max_size = 50_000, min_freq = 1))]
    fn build(texts: Vec<String>, max_size: usize, min_freq: usize) -> Self {
        PyVocabulary {
            inner: CoreVocab::build(&texts, max_size, min_freq),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: CoreVocab::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> String {
        self.inner.decode(&ids)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Model", module = "hat_py")]
struct PyModel {
    params: HatParameters<f32>,
}

fn gen_config(
    max_len: usize,
    beam_width: usize,
    length_penalty: f64,
    min_len: usize,
    trace: bool,
) -> PyResult<GenConfig> {
    let cfg = GenConfig {
        beam_width,
        length_penalty,
        min_len,
        max_len,
        trace_attention: trace,
        ..GenConfig::translation(max_len)
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyHatConfig, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            params: HatParameters::init(&config.inner, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            params: load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.params, &path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyHatConfig {
        PyHatConfig {
            inner: self.params.config.clone(),
        }
    }

    fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Copies matching tensors from `other`; returns how many.
    fn transfer_from(&mut self, other: &PyModel) -> usize {
        self.params.transfer_from(&other.params)
    }

    /// Beam search from a document. Returns the generated ids, the decoded
    /// text and, with `trace`, the per-layer hierarchical attention.
    #[pyo3(signature = (document, vocab, max_len = 64, beam_width = 4, length_penalty = 1.0, min_len = 0, trace = false))]
    #[allow(clippy::too_many_arguments)]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        document: &str,
        vocab: &PyVocabulary,
        max_len: usize,
        beam_width: usize,
        length_penalty: f64,
        min_len: usize,
        trace: bool,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg = gen_config(max_len, beam_width, length_penalty, min_len, trace)?;
        let src = encode_document(
            &segment_sentences(document),
            &vocab.inner,
            self.params.config.max_positions,
        )
        .map_err(err)?;
        let example = EncodedExample::from_source(src, Vec::new());
        let params = &self.params;
        let hyp = py
            .detach(|| {
                let enc = encode_output(params, &Batch::single(&example, PAD_ID)?)?;
                beam_generate(params, &enc, &cfg)
            })
            .map_err(err)?;
        let out = serde_json::json!({
            "tokens": hyp.tokens,
            "text": vocab.inner.decode(&hyp.tokens),
            "logprob": hyp.logprob,
            "trace": hyp.trace,
        });
        to_py(py, &out)
    }

    /// Decodes every example of an encoded JSONL file.
    #[pyo3(signature = (path, vocab, max_len = 64, beam_width = 4, length_penalty = 1.0, min_len = 0))]
    fn generate_file(
        &self,
        py: Python<'_>,
        path: PathBuf,
        vocab: &PyVocabulary,
        max_len: usize,
        beam_width: usize,
        length_penalty: f64,
        min_len: usize,
    ) -> PyResult<Vec<String>> {
        let cfg = gen_config(max_len, beam_width, length_penalty, min_len, false)?;
        let data = read_encoded(&path).map_err(err)?;
        let params = &self.params;
        py.detach(|| decode_texts(params, &data, &vocab.inner, &cfg))
            .map_err(err)
    }

    /// Trains in place on encoded JSONL files; `overrides` are `key=value`
    /// strings applied to the desk-scale optimizer defaults or `config`.
    #[pyo3(signature = (train, valid = None, config = None, overrides = Vec::new(), out_dir = None))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        train: PathBuf,
        valid: Option<PathBuf>,
        config: Option<PathBuf>,
        overrides: Vec<String>,
        out_dir: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let opt: OptimizerConfig =
            load_config(config.as_deref(), &OptimizerConfig::desk(), &overrides).map_err(err)?;
        let train_set = read_encoded(&train).map_err(err)?;
        let valid_set = match &valid {
            Some(p) => read_encoded(p).map_err(err)?,
            None => Vec::new(),
        };
        let start = self.params.clone();
        let outcome = py
            .detach(|| {
                let opts = TrainOptions {
                    out_dir,
                    ..TrainOptions::default()
                };
                run_train(start, &opt, &train_set, &valid_set, &opts)
            })
            .map_err(err)?;
        let summary = serde_json::json!({
            "steps": outcome.steps,
            "best_step": outcome.best_step,
            "best_valid_loss": outcome.best_valid_loss,
            "log": outcome.log,
        });
        self.params = outcome.best;
        to_py(py, &summary)
    }
}

/// Corpus ROUGE and/or BLEU; `metrics` holds "rouge" and "bleu".
#[pyfunction]
#[pyo3(signature = (candidates, references, metrics = vec!["rouge".to_owned(), "bleu".to_owned()]))]
fn evaluate<'py>(
    py: Python<'py>,
    candidates: Vec<String>,
    references: Vec<String>,
    metrics: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let metrics: Vec<Metric> = metrics
        .iter()
        .map(|m| m.parse())
        .collect::<Result<_, _>>()
        .map_err(err)?;
    to_py(
        py,
        &eval_report(&candidates, &references, &metrics).map_err(err)?,
    )
}

/// Head-mean, top-k, renormalized heatmap of one layer of a trace file,
/// as rows over BOS positions.
#[pyfunction]
#[pyo3(signature = (trace_path, layer = 0, top_k = 16))]
fn heatmap(trace_path: PathBuf, layer: usize, top_k: usize) -> PyResult<Vec<Vec<f64>>> {
    let trace = AttentionTrace::load(&trace_path).map_err(err)?;
    Ok(aggregate(&trace, layer, top_k).map_err(err)?.matrix)
}

#[pymodule]
fn hat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HatError", m.py().get_type::<HatError>())?;
    m.add_class::<PyHatConfig>()?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(heatmap, m)?)?;
    Ok(())
}
