//! Python bindings: the main model, surgery, data, and checkpoint
//! operations behind a thin class surface. Build the cdylib with
//! `cargo build --release -p moegraft-py`; `python/smoke_test.py` shows
//! how to load it without an installer.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use moegraft::analytics;
use moegraft::checkpoint::{self, Provenance};
use moegraft::data;
use moegraft::model::{DenseModel, Model, ModelConfig};
use moegraft::moe;
use moegraft::surgery;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

/// Architecture and MoE hyperparameters.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (d_model=64, ffn_dim=128, n_layers=2, n_heads=4, vocab_size=272, max_seq_len=128, n_experts=4, top_k=2, lb_alpha=0.01))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        d_model: usize,
        ffn_dim: usize,
        n_layers: usize,
        n_heads: usize,
        vocab_size: usize,
        max_seq_len: usize,
        n_experts: usize,
        top_k: usize,
        lb_alpha: f32,
    ) -> PyResult<Self> {
        let inner = ModelConfig {
            d_model,
            ffn_dim,
            n_layers,
            n_heads,
            vocab_size,
            max_seq_len,
            n_experts,
            top_k,
            lb_alpha,
        };
        inner.validate().map_err(value_err)?;
        Ok(PyConfig { inner })
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    #[getter]
    fn n_experts(&self) -> usize {
        self.inner.n_experts
    }

    #[getter]
    fn top_k(&self) -> usize {
        self.inner.top_k
    }

    fn dense_param_count(&self) -> usize {
        self.inner.dense_param_count()
    }

    fn moe_param_count(&self) -> usize {
        self.inner.moe_param_count()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// A dense or MoE model state.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().as_str()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.params().total_elements()
    }

    fn frozen_names(&self) -> Vec<String> {
        self.inner.frozen().into_iter().collect()
    }

    /// Logits for one token sequence as a list of per-position rows.
    fn forward(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f32>>> {
        let (logits, _) = moe::forward_batch(&self.inner, &tokens, 1, tokens.len()).map_err(value_err)?;
        let v = *logits.shape().last().unwrap();
        Ok(logits.data().chunks(v).map(|row| row.to_vec()).collect())
    }

    /// Mean over sequences of mean per-token negative log-likelihood.
    fn ntp_loss(&self, seqs: Vec<Vec<u32>>) -> PyResult<f32> {
        moegraft::model::ntp_loss(&self.inner, &seqs).map_err(value_err)
    }

    /// Per-layer top-k expert selections for one sequence (MoE only).
    fn routing(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<u32>>> {
        let Model::Moe(m) = &self.inner else {
            return Err(value_err("routing requires an MoE model"));
        };
        let (_, trace) = m.forward(&tokens).map_err(value_err)?;
        Ok(trace.selections)
    }
}

/// A parameter delta between two dense checkpoints.
#[pyclass(name = "Delta")]
struct PyDelta {
    inner: surgery::Delta,
}

#[pymethods]
impl PyDelta {
    #[getter]
    fn base_id(&self) -> String {
        self.inner.base_id.clone()
    }

    #[getter]
    fn post_id(&self) -> String {
        self.inner.post_id.clone()
    }

    fn max_abs(&self) -> f64 {
        self.inner
            .tensors
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// A tagged token corpus.
#[pyclass(name = "Corpus")]
struct PyCorpus {
    inner: data::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[getter]
    fn tag(&self) -> String {
        self.inner.tag.clone()
    }

    #[getter]
    fn n_docs(&self) -> usize {
        self.inner.docs.len()
    }

    #[getter]
    fn total_tokens(&self) -> usize {
        self.inner.total_tokens()
    }

    fn doc(&self, i: usize) -> PyResult<Vec<u32>> {
        self.inner
            .docs
            .get(i)
            .cloned()
            .ok_or_else(|| value_err(format!("document index {i} out of range")))
    }
}

#[pyfunction]
fn tokenize(text: &[u8]) -> Vec<u32> {
    data::tokenize(text)
}

#[pyfunction]
fn detokenize(ids: Vec<u32>) -> Vec<u8> {
    data::detokenize(&ids)
}

#[pyfunction]
fn init_dense(config: &PyConfig, seed: u64) -> PyResult<PyModel> {
    Ok(PyModel { inner: Model::Dense(DenseModel::init(&config.inner, seed).map_err(value_err)?) })
}

#[pyfunction]
fn upcycle(model: &PyModel, n_experts: usize, top_k: usize) -> PyResult<PyModel> {
    let Model::Dense(dense) = &model.inner else {
        return Err(value_err("upcycle needs a dense model"));
    };
    Ok(PyModel { inner: Model::Moe(moe::upcycle(dense, n_experts, top_k).map_err(value_err)?) })
}

#[pyfunction]
fn compute_delta(base: &PyModel, post: &PyModel) -> PyResult<PyDelta> {
    let (Model::Dense(b), Model::Dense(p)) = (&base.inner, &post.inner) else {
        return Err(value_err("compute_delta needs two dense models"));
    };
    Ok(PyDelta { inner: surgery::compute_delta(b, p, "py-base", "py-post").map_err(value_err)? })
}

#[pyfunction]
fn graft_delta(model: &PyModel, delta: &PyDelta) -> PyResult<PyModel> {
    match &model.inner {
        Model::Moe(m) => {
            let (out, _) = surgery::graft_delta_moe(m, &delta.inner).map_err(value_err)?;
            Ok(PyModel { inner: Model::Moe(out) })
        }
        Model::Dense(m) => {
            let (out, _) = surgery::merge_delta_dense(m, &delta.inner).map_err(value_err)?;
            Ok(PyModel { inner: Model::Dense(out) })
        }
    }
}

#[pyfunction]
#[pyo3(signature = (a, b, lam=0.5))]
fn merge_avg(a: &PyModel, b: &PyModel, lam: f64) -> PyResult<PyModel> {
    let (Model::Dense(x), Model::Dense(y)) = (&a.inner, &b.inner) else {
        return Err(value_err("merge_avg needs two dense models"));
    };
    let (out, _) = surgery::merge_avg_dense(x, y, lam).map_err(value_err)?;
    Ok(PyModel { inner: Model::Dense(out) })
}

#[pyfunction]
fn merge_avg_moe(moe_model: &PyModel, instruct: &PyModel) -> PyResult<PyModel> {
    let (Model::Moe(m), Model::Dense(d)) = (&moe_model.inner, &instruct.inner) else {
        return Err(value_err("merge_avg_moe needs an MoE model and a dense model"));
    };
    let (out, _) = surgery::merge_avg_moe(m, d).map_err(value_err)?;
    Ok(PyModel { inner: Model::Moe(out) })
}

#[pyfunction]
#[pyo3(signature = (tag, seed, n_tokens, alphabet_lo, alphabet_hi, temperature=0.4))]
fn gen_language(
    tag: &str,
    seed: u64,
    n_tokens: usize,
    alphabet_lo: u8,
    alphabet_hi: u8,
    temperature: f64,
) -> PyResult<PyCorpus> {
    let spec = data::LanguageSpec {
        tag: tag.to_string(),
        seed,
        n_tokens,
        alphabet_lo,
        alphabet_hi,
        temperature,
    };
    Ok(PyCorpus { inner: data::gen_language(&spec).map_err(value_err)? })
}

#[pyfunction]
#[pyo3(signature = (model, corpus, batch_size=8, seq_len=64))]
fn perplexity(model: &PyModel, corpus: &PyCorpus, batch_size: usize, seq_len: usize) -> PyResult<f64> {
    analytics::perplexity(&model.inner, &corpus.inner, batch_size, seq_len).map_err(value_err)
}

#[pyfunction]
fn echo_accuracy(model: &PyModel, payloads: Vec<Vec<u32>>) -> PyResult<f64> {
    analytics::echo_accuracy(&model.inner, &payloads).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (model, path, stage="py"))]
fn save_checkpoint(model: &PyModel, path: PathBuf, stage: &str) -> PyResult<String> {
    let provenance = Provenance { stage: stage.to_string(), parent: None, seed: 0 };
    checkpoint::save(&model.inner, &provenance, &path).map_err(io_err)
}

#[pyfunction]
fn load_checkpoint(path: PathBuf) -> PyResult<PyModel> {
    let data = checkpoint::load(&path).map_err(io_err)?;
    Ok(PyModel { inner: data.model })
}

#[pyfunction]
fn checkpoint_hash(path: PathBuf) -> PyResult<String> {
    checkpoint::file_hash(&path).map_err(io_err)
}

#[pymodule]
fn moegraft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDelta>()?;
    m.add_class::<PyCorpus>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(init_dense, m)?)?;
    m.add_function(wrap_pyfunction!(upcycle, m)?)?;
    m.add_function(wrap_pyfunction!(compute_delta, m)?)?;
    m.add_function(wrap_pyfunction!(graft_delta, m)?)?;
    m.add_function(wrap_pyfunction!(merge_avg, m)?)?;
    m.add_function(wrap_pyfunction!(merge_avg_moe, m)?)?;
    m.add_function(wrap_pyfunction!(gen_language, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(echo_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(save_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_hash, m)?)?;
    m.add("EOS", data::EOS)?;
    m.add("PAD", data::PAD)?;
    m.add("QMARK", data::QMARK)?;
    m.add("AMARK", data::AMARK)?;
    m.add("VOCAB_SIZE", data::VOCAB_SIZE)?;
    Ok(())
}
