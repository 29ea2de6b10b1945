//! Python module `hmlstm_py`: vocabularies, models, checkpoints, training
//! runs and the gradient suite.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hmlstm::analysis::{self, ZRatio};
use hmlstm::cli::config::ConfigText;
use hmlstm::cli::run::{self, LoadedModel, RunLog};
use hmlstm::data;
use hmlstm::model::{Arch, Model as CoreModel, ModelConfig, OutputHead};
use hmlstm::numerics::hard_sigmoid_scalar;
use hmlstm::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(module = "hmlstm_py", skip_from_py_object)]
#[derive(Clone)]
struct Vocabulary {
    inner: data::Vocabulary,
}

#[pymethods]
impl Vocabulary {
    #[new]
    fn new(text: &str) -> Self {
        Vocabulary {
            inner: data::Vocabulary::from_text(text),
        }
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size()
    }

    fn encode(&self, text: &str) -> Vec<usize> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        self.inner.decode(&ids)
    }

    fn __len__(&self) -> usize {
        self.inner.size()
    }
}

/// A freshly initialized float32 model.
#[pyclass(module = "hmlstm_py")]
struct Model {
    inner: CoreModel<f32>,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (vocab_size, arch = "hmlstm", units = 128, embed_dim = 64, output_dim = 128,
        output_head = "gated", layer_norm = true, copy_last = false, no_top_down = false,
        slope_alpha = 0.5, seed = 1))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        arch: &str,
        units: usize,
        embed_dim: usize,
        output_dim: usize,
        output_head: &str,
        layer_norm: bool,
        copy_last: bool,
        no_top_down: bool,
        slope_alpha: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let mut config = ModelConfig {
            arch: arch.parse::<Arch>().map_err(PyValueError::new_err)?,
            units,
            embed_dim,
            output_dim,
            vocab_size,
            output_head: output_head.parse::<OutputHead>().map_err(PyValueError::new_err)?,
            ln_on_embeddings: layer_norm,
            seed,
            ..ModelConfig::default()
        };
        config.flags.use_layer_norm = layer_norm;
        config.flags.copy_last = copy_last;
        config.flags.no_top_down = no_top_down;
        config.flags.slope_alpha = slope_alpha;
        Ok(Model {
            inner: CoreModel::new(config).map_err(to_py)?,
        })
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.names().map(str::to_string).collect()
    }

    fn parameter_count(&self) -> usize {
        self.inner.params.count()
    }

    fn parameter_shape(&self, name: &str) -> PyResult<Vec<usize>> {
        let t = self.inner.params.value(name).map_err(to_py)?;
        Ok(t.shape().to_vec())
    }

    /// Bits per character of `ids`, state carried across chunks.
    #[pyo3(signature = (ids, chunk = analysis::EVAL_CHUNK))]
    fn evaluate_bpc(&self, py: Python<'_>, ids: Vec<usize>, chunk: usize) -> PyResult<f64> {
        py.detach(|| analysis::evaluate_bpc(&self.inner, &ids, chunk)).map_err(to_py)
    }
}

/// A trained model read from an `.hmlb` checkpoint.
#[pyclass(module = "hmlstm_py")]
struct Checkpoint {
    inner: LoadedModel,
}

#[pymethods]
impl Checkpoint {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        Ok(Checkpoint {
            inner: LoadedModel::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn vocabulary(&self) -> Vocabulary {
        Vocabulary {
            inner: self.inner.vocab().clone(),
        }
    }

    #[pyo3(signature = (text, chunk = analysis::EVAL_CHUNK))]
    fn bpc(&self, py: Python<'_>, text: &str, chunk: usize) -> PyResult<f64> {
        py.detach(|| self.inner.bpc(text, chunk)).map_err(to_py)
    }

    /// Boundary bits of the two lowest layers with their frequencies.
    fn segment<'py>(&self, py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyDict>> {
        let r = py.detach(|| self.inner.segmentation(text)).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("z1", r.z1.clone())?;
        d.set_item("z2", r.z2.clone())?;
        d.set_item("freq1", r.freq1)?;
        d.set_item("freq2", r.freq2)?;
        d.set_item("z_ratio", r.z_ratio.value())?;
        Ok(d)
    }
}

#[pyfunction]
#[pyo3(signature = (x, alpha = 0.5))]
fn hard_sigmoid(x: f64, alpha: f64) -> f64 {
    hard_sigmoid_scalar(x, alpha)
}

/// `freq1 / freq2`, or `None` when `freq2` is zero.
#[pyfunction]
fn z_ratio(freq1: f64, freq2: f64) -> Option<f64> {
    ZRatio::of(freq1, freq2).value()
}

#[pyfunction]
fn boundary_frequency(bits: Vec<u8>) -> f64 {
    analysis::frequency(&bits)
}

#[pyfunction]
fn synthetic_text(seed: u64, chars: usize) -> String {
    data::synthetic_text(seed, chars)
}

/// Effective configuration as `{key: value}` after defaults and overrides.
#[pyfunction]
#[pyo3(signature = (path, overrides = Vec::new()))]
fn parse_config(path: PathBuf, overrides: Vec<String>) -> PyResult<Vec<(String, String)>> {
    let mut text = ConfigText::read(&path).map_err(to_py)?;
    text.apply_overrides(&overrides).map_err(to_py)?;
    let run = text.resolve().map_err(to_py)?;
    Ok(run.effective.into_iter().map(|(k, v, _)| (k, v)).collect())
}

/// Trains from a config file; returns the run summary.
#[pyfunction]
#[pyo3(signature = (path, overrides = Vec::new()))]
fn train<'py>(py: Python<'py>, path: PathBuf, overrides: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    let summary = py
        .detach(|| {
            let mut text = ConfigText::read(&path)?;
            text.apply_overrides(&overrides)?;
            let config = text.resolve()?;
            let mut log = RunLog::new(Some(&run::run_dir(&config).join("run.log")), false)?;
            run::train(&config, None, &mut log)
        })
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("name", summary.name.clone())?;
    d.set_item("outcome", summary.outcome.clone())?;
    d.set_item("iterations", summary.iterations)?;
    d.set_item("epochs", summary.epochs)?;
    d.set_item("best_valid_bpc", summary.best_valid_bpc)?;
    d.set_item("test_bpc", summary.test_bpc)?;
    d.set_item("z_freq", summary.z_freq.clone())?;
    d.set_item("diverged_at", summary.diverged_at)?;
    Ok(d)
}

/// `(name, max_rel_error, passed)` for every check of the gradient suite.
#[pyfunction]
#[pyo3(signature = (seed = 1))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let checks = py.detach(|| hmlstm::gradcheck::run_suite(seed)).map_err(to_py)?;
    Ok(checks
        .into_iter()
        .map(|c| {
            let ok = c.passes(hmlstm::gradcheck::TOLERANCE);
            (c.name, c.max_rel_error, ok)
        })
        .collect())
}

#[pymodule]
fn hmlstm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<Model>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(hard_sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(z_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_frequency, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_text, m)?)?;
    m.add_function(wrap_pyfunction!(parse_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("GRADIENT_TOLERANCE", hmlstm::gradcheck::TOLERANCE)?;
    Ok(())
}
