//! Python bindings: tensors, feature extraction, the target encoding, model
//! checkpoints and the corpus-to-analysis pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use stepsrl_core::config::RunConfig;
use stepsrl_core::corpus::PhonemeInventory;
use stepsrl_core::eval;
use stepsrl_core::model::{self, ModelParams};
use stepsrl_core::pipeline::{self, Snapshot, Split};
use stepsrl_core::signal::{MfccConfig, MfccExtractor, Waveform, SAMPLE_RATE};
use stepsrl_core::synth::{synth_corpus as synth, SynthConfig};
use stepsrl_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_)
        | Error::Parse { .. }
        | Error::MissingFile(_)
        | Error::Corpus(_)
        | Error::Audio { .. }
        | Error::Checkpoint(_)
        | Error::Dimension(_)
        | Error::Contract(_)
        | Error::Analysis(_)
        | Error::Json(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_split(split: &str) -> PyResult<Split> {
    split.parse().map_err(PyValueError::new_err)
}

/// Dense row-major f32 tensor.
#[pyclass(name = "Tensor", module = "stepsrl", from_py_object)]
#[derive(Clone)]
struct PyTensor(stepsrl_core::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        stepsrl_core::Tensor::new(shape, data)
            .map(PyTensor)
            .map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    /// Nested rows of a rank-2 tensor.
    fn tolist(&self) -> PyResult<Vec<Vec<f32>>> {
        if self.0.rank() != 2 {
            return Err(PyValueError::new_err("tolist needs a rank-2 tensor"));
        }
        Ok((0..self.0.rows()).map(|r| self.0.row(r).to_vec()).collect())
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        let mut tape = stepsrl_core::Tape::new();
        let a = tape.constant(self.0.clone());
        let b = tape.constant(other.0.clone());
        let c = tape.matmul(a, b).map_err(to_py)?;
        Ok(PyTensor(tape.value(c).clone()))
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// MFCC frames (`frames × d_mfcc`) of 16 kHz 16-bit samples.
#[pyfunction]
#[pyo3(signature = (samples, d_mfcc = 50))]
fn mfcc(samples: Vec<i16>, d_mfcc: usize) -> PyResult<PyTensor> {
    let extractor = MfccExtractor::new(&MfccConfig::with_dim(d_mfcc)).map_err(to_py)?;
    let wave = Waveform::new(samples, SAMPLE_RATE).map_err(to_py)?;
    Ok(PyTensor(extractor.compute(&wave)))
}

/// Attention scores `α_i = h_i • f` and the rescaled rows `α_i h_i`.
#[pyfunction]
fn entangle(h: &PyTensor, f: Vec<f32>) -> PyResult<(PyTensor, Vec<f32>)> {
    let (out, alpha) = model::entangle(&h.0, &f).map_err(to_py)?;
    Ok((PyTensor(out), alpha))
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    eval::spearman_rho(&x, &y).map_err(to_py)
}

#[pyfunction]
fn cosine(u: Vec<f32>, v: Vec<f32>) -> f64 {
    eval::cosine(&u, &v)
}

/// Phone inventory with the four special tokens appended.
#[pyclass(name = "PhonemeInventory", module = "stepsrl")]
struct PyInventory(PhonemeInventory);

#[pymethods]
impl PyInventory {
    #[new]
    fn new(phones: Vec<String>) -> Self {
        PyInventory(PhonemeInventory::new(phones))
    }

    #[getter]
    fn size(&self) -> usize {
        self.0.size()
    }

    #[getter]
    fn phones(&self) -> Vec<String> {
        self.0.phones().to_vec()
    }

    /// Fixed-length target token ids for a phone sequence.
    fn encode(&self, phones: Vec<String>) -> PyResult<Vec<usize>> {
        self.0.encode(&phones).map_err(to_py)
    }

    fn decode(&self, ids: Vec<usize>) -> Vec<String> {
        self.0.decode(&ids)
    }
}

/// A trained model loaded from a checkpoint.
#[pyclass(name = "Model", module = "stepsrl")]
struct PyModel {
    params: ModelParams,
    snapshot: Snapshot,
    path: PathBuf,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, snapshot) = pipeline::load_model(&path, None).map_err(to_py)?;
        Ok(PyModel {
            params,
            snapshot,
            path,
        })
    }

    /// Run configuration and model sizes as JSON.
    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.snapshot)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn phones(&self) -> Vec<String> {
        self.snapshot.phones.clone()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.names()
    }

    fn parameter(&self, name: &str) -> PyResult<PyTensor> {
        self.params
            .named()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| PyTensor(t.clone()))
            .ok_or_else(|| PyValueError::new_err(format!("no parameter named {name:?}")))
    }

    /// Averaged latent vector per word of a split.
    #[pyo3(signature = (split = "all"))]
    fn word_vectors<'py>(&self, py: Python<'py>, split: &str) -> PyResult<Bound<'py, PyDict>> {
        let reps = pipeline::representations(&self.path, parse_split(split)?).map_err(to_py)?;
        let out = PyDict::new(py);
        for r in reps {
            out.set_item(r.word, r.vector)?;
        }
        Ok(out)
    }
}

/// Writes a synthetic corpus; returns utterance and speaker counts.
#[pyfunction]
#[pyo3(signature = (out, utterances = 50, seed = 0, embedding_dim = 50))]
fn synth_corpus<'py>(
    py: Python<'py>,
    out: PathBuf,
    utterances: usize,
    seed: u64,
    embedding_dim: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SynthConfig {
        utterances,
        seed,
        embedding_dim,
        ..SynthConfig::default()
    };
    let s = synth(&out, &cfg).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("utterances", s.utterances)?;
    d.set_item("speakers", s.speakers)?;
    d.set_item("word_tokens", s.word_tokens)?;
    Ok(d)
}

/// The configuration file with every default filled in, as JSON.
#[pyfunction]
fn resolve_config(path: PathBuf) -> PyResult<String> {
    Ok(RunConfig::load(&path).map_err(to_py)?.resolved().to_json())
}

/// Trains from a config file; returns artifact paths and the best epoch.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::load(&config).map_err(to_py)?;
    let report = py.detach(|| pipeline::run_train(&cfg)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("checkpoint", report.checkpoint)?;
    d.set_item("history", report.history)?;
    d.set_item("resolved_config", report.resolved_config)?;
    d.set_item("epochs", report.outcome.history.len())?;
    d.set_item("best_epoch", report.outcome.best_epoch)?;
    Ok(d)
}

/// Phonetic accuracy of a checkpoint on one split; reports go to `out_dir`.
#[pyfunction]
#[pyo3(signature = (checkpoint, split = "test", out_dir = None, benchmarks = None))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    split: &str,
    out_dir: Option<PathBuf>,
    benchmarks: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let split = parse_split(split)?;
    let out = out_dir.unwrap_or_else(|| checkpoint.parent().map(PathBuf::from).unwrap_or_default());
    let report = py
        .detach(|| pipeline::run_eval(&checkpoint, split, benchmarks.as_deref(), &out, None))
        .map_err(to_py)?;
    let a = &report.accuracy;
    let d = PyDict::new(py);
    d.set_item("token_acc", a.token_acc)?;
    d.set_item("seq_acc", a.seq_acc)?;
    d.set_item("mean_loss", a.mean_loss)?;
    d.set_item("tokens", a.tokens)?;
    let sim = PyDict::new(py);
    for (name, r) in &report.similarity {
        sim.set_item(name, r.rho)?;
    }
    d.set_item("similarity", sim)?;
    Ok(d)
}

#[pymodule]
fn stepsrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyInventory>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(mfcc, m)?)?;
    m.add_function(wrap_pyfunction!(entangle, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
