//! Python bindings: inventory, checkpoints and inference, data generation,
//! training, and the loss and metric primitives.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cupe::data::{load_wav, make_dataset, DatasetConfig, Manifest};
use cupe::metrics::{align, greedy_decode_rows, per};
use cupe::model::checkpoint::Checkpoint;
use cupe::model::EncoderState;
use cupe::nn::tensor::Tensor;
use cupe::objectives::{ctc_loss, silence_loss, CtcTarget, SilenceMask};
use cupe::phonemap::{PhonemeInventory, UnknownSymbols};
use cupe::train::{evaluate_corpus, infer, pretrain_ssl, train_supervised, Corpus, TrainConfig};
use cupe::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::NonFinite(m) => PyRuntimeError::new_err(format!("non-finite value encountered: {m}")),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    Tensor::new(&[rows.len(), width], rows.concat()).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let width = *t.shape().last().unwrap_or(&1);
    t.data().chunks(width.max(1)).map(<[f64]>::to_vec).collect()
}

/// Phoneme inventory: raw-symbol mapping onto classes plus blank.
#[pyclass(name = "Inventory", module = "cupe_py")]
struct PyInventory {
    inner: PhonemeInventory,
}

#[pymethods]
impl PyInventory {
    /// The shipped 65-class inventory, or the TSV at `path`.
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => PhonemeInventory::load(p).map_err(py_err)?,
            None => PhonemeInventory::default_inventory(),
        };
        Ok(Self { inner })
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn blank_id(&self) -> usize {
        self.inner.blank_id()
    }

    /// Class symbols followed by the blank label.
    fn labels(&self) -> Vec<String> {
        self.inner.labels()
    }

    /// Map raw tokens to class ids; unknown tokens raise.
    fn map(&self, tokens: Vec<String>) -> PyResult<Vec<usize>> {
        Ok(self.inner.map_sequence(&tokens, UnknownSymbols::Strict).map_err(py_err)?.class_ids)
    }

    fn symbols(&self, ids: Vec<usize>) -> PyResult<Vec<String>> {
        ids.into_iter()
            .map(|k| {
                (k < self.inner.num_classes())
                    .then(|| self.inner.symbol(k).to_string())
                    .ok_or_else(|| PyValueError::new_err(format!("class id {k} out of range")))
            })
            .collect()
    }

    fn truncated(&self, k: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.truncated(k).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.num_classes()
    }

    fn __repr__(&self) -> String {
        format!("Inventory({} classes)", self.inner.num_classes())
    }
}

/// A trained encoder with its classifier, loaded from a checkpoint.
#[pyclass(name = "Model", module = "cupe_py")]
struct PyModel {
    inner: EncoderState,
    sha256: String,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(py_err)?;
        Ok(Self {
            sha256: ck.hash().map_err(py_err)?,
            inner: EncoderState::from_checkpoint(&ck).map_err(py_err)?,
        })
    }

    /// Freshly initialised model: the CPU-sized configuration when `desk`,
    /// the full one otherwise.
    #[staticmethod]
    #[pyo3(signature = (num_classes, seed=0, desk=true))]
    fn random(num_classes: usize, seed: u64, desk: bool) -> PyResult<Self> {
        let mut cfg = if desk {
            TrainConfig::desk(num_classes).model
        } else {
            TrainConfig::default().model
        };
        cfg.num_classes = num_classes;
        Ok(Self {
            inner: EncoderState::build(cfg, seed).map_err(py_err)?,
            sha256: String::new(),
        })
    }

    #[getter]
    fn sha256(&self) -> &str {
        &self.sha256
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config.num_classes
    }

    #[getter]
    fn frame_hop(&self) -> f64 {
        self.inner.config.window.frame_hop_secs()
    }

    /// Trainable parameter counts by group.
    fn param_counts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = self.inner.param_report();
        let d = PyDict::new(py);
        d.set_item("total", r.total)?;
        d.set_item("feature_extractor", r.feature_extractor)?;
        d.set_item("transformer", r.transformer)?;
        d.set_item("classifier", r.classifier)?;
        d.set_item("projection", r.projection)?;
        d.set_item("quantizer", r.quantizer)?;
        Ok(d)
    }

    /// Stitched per-frame class probabilities `[T_f][C+1]` for 16 kHz samples.
    fn posteriors(&self, py: Python<'_>, samples: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let post = py.detach(|| self.inner.forward_clip(&samples)).map_err(py_err)?;
        Ok(rows(&post.frames))
    }

    /// Decoded phonemes as `(symbol, start_s, end_s, confidence)` tuples.
    fn infer(&self, py: Python<'_>, samples: Vec<f64>, inventory: &PyInventory) -> PyResult<Vec<(String, f64, f64, f64)>> {
        let out = py.detach(|| infer(&self.inner, &samples, &inventory.inner)).map_err(py_err)?;
        Ok(out.phones.into_iter().map(|p| (p.symbol, p.start_s, p.end_s, p.confidence)).collect())
    }

    /// Score the model on a labelled manifest; returns the metrics report
    /// as a JSON string.
    #[pyo3(signature = (manifest, inventory, split=None))]
    fn evaluate(&self, py: Python<'_>, manifest: PathBuf, inventory: &PyInventory, split: Option<String>) -> PyResult<String> {
        let inv = &inventory.inner;
        let model = &self.inner;
        py.detach(|| {
            let m = Manifest::load(&manifest)?.filter_split(split.as_deref());
            let corpus = Corpus::load(&m, Some(inv), UnknownSymbols::Strict, &model.config.window, -40.0)?;
            let out = evaluate_corpus(model, &corpus, inv, None)?;
            serde_json::to_string(&out.report).map_err(|e| Error::InvalidArgument(e.to_string()))
        })
        .map_err(py_err)
    }
}

/// Load a 16 kHz mono WAV as `(samples, sample_rate)`.
#[pyfunction(name = "load_wav")]
fn py_load_wav(path: PathBuf) -> PyResult<(Vec<f64>, u32)> {
    let clip = load_wav(path).map_err(py_err)?;
    Ok((clip.samples, clip.sample_rate))
}

/// Write a synthetic corpus; returns the number of utterances.
#[pyfunction(name = "make_dataset")]
#[pyo3(signature = (out, utterances=50, classes=8, seed=0, eval_utterances=0))]
fn py_make_dataset(out: PathBuf, utterances: usize, classes: usize, seed: u64, eval_utterances: usize) -> PyResult<usize> {
    let cfg = DatasetConfig {
        utterances,
        classes,
        seed,
        eval_utterances,
        ..DatasetConfig::default()
    };
    let m = make_dataset(&out, &cfg, &PhonemeInventory::default_inventory()).map_err(py_err)?;
    Ok(m.len())
}

fn parse_config(config_toml: Option<&str>, num_classes: usize) -> PyResult<TrainConfig> {
    match config_toml {
        Some(text) => TrainConfig::from_toml(text).map_err(py_err),
        None => Ok(TrainConfig::desk(num_classes)),
    }
}

/// Supervised training from a manifest. Writes the checkpoint to `out` and
/// returns its SHA-256.
#[pyfunction]
#[pyo3(signature = (manifest, inventory, out, config_toml=None))]
fn train(py: Python<'_>, manifest: PathBuf, inventory: &PyInventory, out: PathBuf, config_toml: Option<&str>) -> PyResult<String> {
    let inv = &inventory.inner;
    let cfg = parse_config(config_toml, inv.num_classes())?;
    py.detach(|| {
        let m = Manifest::load(&manifest)?;
        let corpus = Corpus::load(&m, Some(inv), cfg.unknown_symbols, &cfg.model.window, cfg.silence_threshold_db)?;
        let ck = train_supervised(&cfg, &corpus, None, inv)?.checkpoint(inv)?;
        ck.save(&out)?;
        ck.hash()
    })
    .map_err(py_err)
}

/// Self-supervised pretraining from a manifest. Writes the checkpoint to
/// `out` and returns its SHA-256.
#[pyfunction]
#[pyo3(signature = (manifest, out, config_toml=None))]
fn pretrain(py: Python<'_>, manifest: PathBuf, out: PathBuf, config_toml: Option<&str>) -> PyResult<String> {
    let cfg = parse_config(config_toml, 8)?;
    py.detach(|| {
        let m = Manifest::load(&manifest)?;
        let corpus = Corpus::load(&m, None, cfg.unknown_symbols, &cfg.model.window, cfg.silence_threshold_db)?;
        let ck = pretrain_ssl(&cfg, &corpus)?.checkpoint()?;
        ck.save(&out)?;
        ck.hash()
    })
    .map_err(py_err)
}

/// CTC negative log-likelihood of `[T][C+1]` log-probabilities (blank last)
/// and its gradient.
#[pyfunction(name = "ctc_loss")]
fn py_ctc_loss(log_probs: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let (loss, grad) = ctc_loss(&matrix(&log_probs)?, &CtcTarget::new(target)).map_err(py_err)?;
    Ok((loss, rows(&grad)))
}

/// Silence-aware blank penalty for one utterance.
#[pyfunction(name = "silence_loss")]
fn py_silence_loss(blank_probs: Vec<f64>, silent: Vec<bool>) -> PyResult<f64> {
    silence_loss(&blank_probs, &SilenceMask::from_flags(silent)).map_err(py_err)
}

/// Greedy CTC decode of `[T][C+1]` probabilities (blank last).
#[pyfunction]
fn greedy_decode(probs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    Ok(greedy_decode_rows(&matrix(&probs)?).sequence)
}

/// Levenshtein alignment counts and phoneme error rate.
#[pyfunction(name = "align")]
fn py_align<'py>(py: Python<'py>, truth: Vec<usize>, pred: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
    let ar = align(&truth, &pred);
    let d = PyDict::new(py);
    d.set_item("matches", ar.matches)?;
    d.set_item("substitutions", ar.substitutions)?;
    d.set_item("insertions", ar.insertions)?;
    d.set_item("deletions", ar.deletions)?;
    d.set_item("per", per(&ar))?;
    Ok(d)
}

/// SHA-256 of a checkpoint's canonical bytes.
#[pyfunction]
fn checkpoint_hash(path: PathBuf) -> PyResult<String> {
    Checkpoint::load(path).and_then(|ck| ck.hash()).map_err(py_err)
}

#[pymodule]
fn cupe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyInventory>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(py_load_wav, m)?)?;
    m.add_function(wrap_pyfunction!(py_make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(py_ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(py_silence_loss, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(py_align, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_hash, m)?)?;
    Ok(())
}
