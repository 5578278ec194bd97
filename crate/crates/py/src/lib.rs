//! Python bindings for the `robquant` library.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use robquant::checkpoint::Checkpoint as CoreCheckpoint;
use robquant::data::{self, DataSplit};
use robquant::error_model::{self, ErrorEstimate, ErrorModel};
use robquant::harness;
use robquant::model::ModelSpec as CoreSpec;
use robquant::quantizer::{self, FitMethod, QuantParams as CoreParams, QuantScheme as CoreScheme};
use robquant::regularizers::{self, SatNlKind, SymRegConfig};
use robquant::trainer::{self, SamConfig, TrainConfig};

fn err(e: robquant::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Tensor", module = "robquant", skip_from_py_object)]
#[derive(Clone)]
struct Tensor {
    inner: robquant::Tensor,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        robquant::Tensor::new(shape, data).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

#[pyclass(name = "QuantScheme", module = "robquant", skip_from_py_object)]
#[derive(Clone)]
struct QuantScheme {
    inner: CoreScheme,
}

#[pymethods]
impl QuantScheme {
    /// Per-output-channel symmetric quantizer along `axis`.
    #[staticmethod]
    #[pyo3(signature = (bits, axis = 0, fit = "minmax"))]
    fn weight(bits: u32, axis: usize, fit: &str) -> PyResult<Self> {
        let fit = FitMethod::parse(fit).map_err(err)?;
        CoreScheme::weight(bits, axis, fit).map(|inner| Self { inner }).map_err(err)
    }

    /// Per-tensor asymmetric quantizer.
    #[staticmethod]
    fn activation(bits: u32) -> PyResult<Self> {
        CoreScheme::activation(bits).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn bits(&self) -> u32 {
        self.inner.bits
    }

    fn level_range(&self) -> (i64, i64) {
        self.inner.level_range()
    }
}

#[pyclass(name = "QuantParams", module = "robquant", skip_from_py_object)]
#[derive(Clone)]
struct QuantParams {
    inner: CoreParams,
}

#[pymethods]
impl QuantParams {
    #[getter]
    fn step(&self) -> Vec<f64> {
        self.inner.step.clone()
    }

    #[getter]
    fn zero_point(&self) -> Vec<i64> {
        self.inner.zero_point.clone()
    }

    #[getter]
    fn clip(&self) -> Vec<f64> {
        self.inner.clip.clone()
    }

    fn scaled(&self, ratio: f64, scheme: &QuantScheme) -> PyResult<Self> {
        quantizer::scale_step(&self.inner, ratio, &scheme.inner)
            .map(|inner| Self { inner })
            .map_err(err)
    }
}

#[pyfunction]
fn fit_params(t: &Tensor, scheme: &QuantScheme) -> PyResult<QuantParams> {
    quantizer::fit_params(&t.inner, &scheme.inner)
        .map(|inner| QuantParams { inner })
        .map_err(err)
}

#[pyfunction]
fn quantize(t: &Tensor, params: &QuantParams, scheme: &QuantScheme) -> PyResult<Tensor> {
    quantizer::quantize(&t.inner, &params.inner, &scheme.inner)
        .map(|inner| Tensor { inner })
        .map_err(err)
}

#[pyfunction]
fn quantize_single_level(t: &Tensor, params: &QuantParams, scheme: &QuantScheme, level: i64) -> PyResult<Tensor> {
    quantizer::quantize_single_level(&t.inner, &params.inner, &scheme.inner, level)
        .map(|inner| Tensor { inner })
        .map_err(err)
}

fn estimate(e: ErrorEstimate) -> HashMap<&'static str, f64> {
    HashMap::from([("truncation", e.truncation), ("rounding", e.rounding), ("total", e.total), ("alpha", e.alpha)])
}

#[pyfunction]
fn quant_error_normal(alpha: f64, bits: u32) -> PyResult<HashMap<&'static str, f64>> {
    error_model::quant_error_normal(alpha, bits).map(estimate).map_err(err)
}

#[pyfunction]
fn quant_error_clamped(alpha: f64, d: f64, bits: u32) -> PyResult<HashMap<&'static str, f64>> {
    error_model::quant_error_clamped(alpha, d, bits).map(estimate).map_err(err)
}

/// Error-minimizing clip for a standard normal, or one clamped to `±d`.
#[pyfunction]
#[pyo3(signature = (bits, d = None))]
fn optimal_alpha(bits: u32, d: Option<f64>) -> f64 {
    error_model::optimal_alpha(bits, d.map_or(ErrorModel::Normal, ErrorModel::Clamped))
}

#[pyfunction]
#[pyo3(signature = (n, alpha, bits, d = None, seed = 0))]
fn mc_quant_error(n: usize, alpha: f64, bits: u32, d: Option<f64>, seed: u64) -> PyResult<f64> {
    error_model::mc_quant_error(n, alpha, bits, d, seed).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (w, channel_axis = 0))]
fn sym_loss1(w: &Tensor, channel_axis: usize) -> PyResult<f64> {
    regularizers::sym_loss1_value(&w.inner, channel_axis).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (w, channel_axis = 0))]
fn sym_loss2(w: &Tensor, channel_axis: usize) -> PyResult<f64> {
    regularizers::sym_loss2_value(&w.inner, channel_axis).map_err(err)
}

/// Applies a saturating weight nonlinearity (`tanh`, `erf` or `gudermannian`) elementwise.
#[pyfunction]
fn satnl(t: &Tensor, kind: &str) -> PyResult<Tensor> {
    let kind = SatNlKind::parse(kind).map_err(err)?;
    Ok(Tensor {
        inner: t.inner.map(|x| kind.eval(x)),
    })
}

#[pyclass(name = "Dataset", module = "robquant", skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    split: DataSplit,
}

#[pymethods]
impl Dataset {
    /// Gaussian class clusters in `dim` dimensions.
    #[staticmethod]
    #[pyo3(signature = (n, dim, classes = 4, spread = 0.75, seed = 0, val_fraction = 0.2))]
    fn blobs(n: usize, dim: usize, classes: usize, spread: f64, seed: u64, val_fraction: f64) -> PyResult<Self> {
        let split = data::gaussian_blobs(n, dim, classes, spread, seed)
            .and_then(|d| d.split(val_fraction))
            .map_err(err)?;
        Ok(Self { split })
    }

    /// Four-class striped/spotted grayscale images of `size × size` pixels.
    #[staticmethod]
    #[pyo3(signature = (n, size = 12, noise = 0.35, seed = 0, val_fraction = 0.2))]
    fn patterns(n: usize, size: usize, noise: f64, seed: u64, val_fraction: f64) -> PyResult<Self> {
        let split = data::pattern_images(n, size, noise, seed)
            .and_then(|d| d.split(val_fraction))
            .map_err(err)?;
        Ok(Self { split })
    }

    #[getter]
    fn train_size(&self) -> usize {
        self.split.train.len()
    }

    #[getter]
    fn val_size(&self) -> usize {
        self.split.val.len()
    }

    #[getter]
    fn sample_shape(&self) -> Vec<usize> {
        self.split.train.sample_shape().to_vec()
    }
}

#[pyclass(name = "ModelSpec", module = "robquant", skip_from_py_object)]
#[derive(Clone)]
struct ModelSpec {
    inner: CoreSpec,
}

#[pymethods]
impl ModelSpec {
    #[staticmethod]
    fn mlp(widths: Vec<usize>) -> PyResult<Self> {
        CoreSpec::mlp(widths).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (in_channels, image, channels = (8, 8), hidden = 32, classes = 4))]
    fn small_cnn(in_channels: usize, image: usize, channels: (usize, usize), hidden: usize, classes: usize) -> PyResult<Self> {
        CoreSpec::small_cnn(in_channels, image, [channels.0, channels.1], hidden, classes)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    /// Copy with the saturating nonlinearity on every layer.
    fn with_satnl(&self, kind: &str) -> PyResult<Self> {
        let kind = SatNlKind::parse(kind).map_err(err)?;
        Ok(Self {
            inner: self.inner.clone().with_satnl_all(kind),
        })
    }

    #[getter]
    fn parameters(&self) -> usize {
        self.inner.param_count()
    }

    fn __repr__(&self) -> String {
        format!("ModelSpec({})", self.inner)
    }
}

#[pyclass(name = "Checkpoint", module = "robquant", skip_from_py_object)]
#[derive(Clone)]
struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreCheckpoint::load(&path).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        CoreCheckpoint::from_bytes(data).map(|inner| Self { inner }).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let bytes = self.inner.to_bytes().map_err(err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    #[getter]
    fn meta(&self) -> HashMap<String, String> {
        self.inner.meta.clone().into_iter().collect()
    }

    #[getter]
    fn spec(&self) -> ModelSpec {
        ModelSpec {
            inner: self.inner.spec.clone(),
        }
    }

    /// Effective (post-nonlinearity) weights, one tensor per layer.
    fn weights(&self) -> Vec<Tensor> {
        self.inner
            .effective_weights()
            .into_iter()
            .map(|inner| Tensor { inner })
            .collect()
    }

    /// Floating-point accuracy on the validation split.
    fn evaluate(&self, data: &Dataset) -> PyResult<f64> {
        trainer::evaluate(&self.inner, &data.split.val, None).map_err(err)
    }
}

/// Trains a model. `sam_rho` switches on sharpness-aware updates (adaptive with `asam`);
/// `lambda1` / `lambda2` weight the symmetry regularizer.
#[pyfunction]
#[pyo3(signature = (
    spec, data, *, epochs = 30, batch_size = 32, lr = 0.05, weight_decay = 5e-4, momentum = 0.9,
    seed = 0, sam_rho = None, asam = false, lambda1 = 0.0, lambda2 = 0.0
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    spec: &ModelSpec,
    data: &Dataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    seed: u64,
    sam_rho: Option<f64>,
    asam: bool,
    lambda1: f64,
    lambda2: f64,
) -> PyResult<Checkpoint> {
    let sam = match (sam_rho, asam) {
        (None, _) => SamConfig::off(),
        (Some(r), false) => SamConfig::sam(r),
        (Some(r), true) => SamConfig::asam(r),
    };
    let cfg = TrainConfig {
        epochs,
        batch_size,
        lr,
        weight_decay,
        momentum,
        seed,
        sam,
        symreg: SymRegConfig {
            lambda1,
            lambda2,
            ..SymRegConfig::off()
        },
        ..TrainConfig::default()
    };
    let (spec, split) = (&spec.inner, &data.split);
    py.detach(|| trainer::train(spec, split, &cfg))
        .map(|inner| Checkpoint { inner })
        .map_err(err)
}

/// Post-training quantization; `None` keeps that side in floating point.
#[pyfunction]
#[pyo3(signature = (ckpt, data, bits_w = Some(4), bits_a = None, fit = "minmax"))]
fn ptq(
    ckpt: &Checkpoint,
    data: &Dataset,
    bits_w: Option<u32>,
    bits_a: Option<u32>,
    fit: &str,
) -> PyResult<HashMap<&'static str, f64>> {
    let fit = FitMethod::parse(fit).map_err(err)?;
    let r = harness::ptq_pipeline(&ckpt.inner, &data.split, bits_w, bits_a, fit).map_err(err)?;
    Ok(HashMap::from([
        ("fp_accuracy", r.fp_accuracy),
        ("accuracy", r.accuracy),
        ("drop", r.drop()),
        ("drift_max", r.drift_max()),
    ]))
}

#[pymodule]
fn robquant_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<QuantScheme>()?;
    m.add_class::<QuantParams>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<ModelSpec>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(fit_params, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_single_level, m)?)?;
    m.add_function(wrap_pyfunction!(quant_error_normal, m)?)?;
    m.add_function(wrap_pyfunction!(quant_error_clamped, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(mc_quant_error, m)?)?;
    m.add_function(wrap_pyfunction!(sym_loss1, m)?)?;
    m.add_function(wrap_pyfunction!(sym_loss2, m)?)?;
    m.add_function(wrap_pyfunction!(satnl, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ptq, m)?)?;
    Ok(())
}
