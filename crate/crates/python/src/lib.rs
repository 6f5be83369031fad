//! Python bindings for the `stockconv` engine.

use ndarray::{Array1, Array3};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;

use stockconv::data::{self, PipelineOptions, RawFrame, SampleSet as CoreSampleSet};
use stockconv::metrics;
use stockconv::nn::{self, ActivationKind, ConvLayer, FeatureMap, Mode, ModelConfig, Params};
use stockconv::optim::{self, AdamState, HyperParams};
use stockconv::persist::{self as store, Checkpoint};
use stockconv::synthetic::{self, SynthOptions};
use stockconv::train::{self as trainer, GradCheckOptions, TrainConfig};

create_exception!(pystockconv, StockconvError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    StockconvError::new_err(e.to_string())
}

fn feature_map(rows: Vec<Vec<f64>>) -> PyResult<FeatureMap> {
    FeatureMap::from_rows(&rows).map_err(err)
}

fn activation(name: &str) -> PyResult<ActivationKind> {
    Ok(match name {
        "relu" => ActivationKind::Relu,
        "leaky_relu" => ActivationKind::leaky(),
        "sigmoid" => ActivationKind::Sigmoid,
        "identity" => ActivationKind::Identity,
        other => return Err(err(format!("unknown activation '{other}'"))),
    })
}

/// Cleaned OHLC bars.
#[pyclass(module = "pystockconv")]
struct Frame {
    inner: RawFrame,
}

#[pymethods]
impl Frame {
    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_ohlc_csv(path).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (rows=20_000, seed=1, noise=0.4, amplitude=1.0))]
    fn synthetic(rows: usize, seed: u64, noise: f64, amplitude: f64) -> Self {
        let opts = SynthOptions {
            rows,
            seed,
            noise,
            amplitude,
            ..SynthOptions::default()
        };
        Self {
            inner: synthetic::generate(&opts).frame,
        }
    }

    #[staticmethod]
    #[pyo3(signature = (rows, price=100.0))]
    fn flat(rows: usize, price: f64) -> Self {
        Self {
            inner: synthetic::flat_series(rows, price),
        }
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        synthetic::save_csv(&self.inner, path).map_err(err)
    }

    /// Rows dropped while parsing.
    #[getter]
    fn dropped(&self) -> usize {
        self.inner.dropped
    }

    /// `[open, high, low, close]` per row.
    fn prices(&self) -> Vec<[f64; 4]> {
        self.inner.rows.iter().map(|r| r.features()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// 1 where `high[i + horizon] > high[i]`, for each row that has a future.
#[pyfunction]
#[pyo3(signature = (frame, horizon=15))]
fn label_high(frame: &Frame, horizon: usize) -> PyResult<Vec<u8>> {
    let labeled = data::label_high15(&frame.inner, horizon).map_err(err)?;
    Ok(labeled.labels().collect())
}

/// Windowed samples.
#[pyclass(module = "pystockconv", skip_from_py_object)]
#[derive(Clone)]
struct SampleSet {
    inner: CoreSampleSet,
}

#[pymethods]
impl SampleSet {
    #[new]
    fn new(windows: Vec<Vec<Vec<f64>>>, labels: Vec<u8>) -> PyResult<Self> {
        if windows.len() != labels.len() {
            return Err(err(format!("{} windows but {} labels", windows.len(), labels.len())));
        }
        let samples = windows
            .into_iter()
            .zip(labels)
            .map(|(w, label)| {
                if label > 1 {
                    return Err(err(format!("label {label} is not 0 or 1")));
                }
                Ok(data::Sample {
                    window: feature_map(w)?,
                    label,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let window_len = samples.first().map_or(0, |s| s.window.length());
        if samples.iter().any(|s| s.window.length() != window_len) {
            return Err(err("windows differ in length"));
        }
        Ok(Self {
            inner: CoreSampleSet {
                samples,
                window_len,
            },
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: store::load_samples(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        store::save_samples(path, &self.inner).map_err(err)
    }

    #[getter]
    fn window_len(&self) -> usize {
        self.inner.window_len
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.labels()
    }

    fn positive_fraction(&self) -> f64 {
        self.inner.positive_fraction()
    }

    /// Channel-major rows of sample `i`.
    fn window(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .samples
            .get(i)
            .map(|s| s.window.to_rows())
            .ok_or_else(|| err(format!("index {i} out of range")))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Output of the preprocessing chain.
#[pyclass(module = "pystockconv")]
struct Dataset {
    #[pyo3(get)]
    train: SampleSet,
    #[pyo3(get)]
    test: SampleSet,
    stats: data::NormStats,
    summary: data::PrepareSummary,
}

#[pymethods]
impl Dataset {
    /// `(min, max)` per feature, fitted on the training rows.
    #[getter]
    fn stats(&self) -> ([f64; 4], [f64; 4]) {
        (self.stats.min, self.stats.max)
    }

    #[getter]
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = &self.summary;
        let d = PyDict::new(py);
        d.set_item("rows_read", s.rows_read)?;
        d.set_item("rows_dropped", s.rows_dropped)?;
        d.set_item("rows_labeled", s.rows_labeled)?;
        d.set_item("train_rows", s.train_rows)?;
        d.set_item("test_rows", s.test_rows)?;
        d.set_item("train_windows", s.train_windows)?;
        d.set_item("test_windows", s.test_windows)?;
        d.set_item("train_positive_fraction", s.train_positive_fraction)?;
        d.set_item("test_positive_fraction", s.test_positive_fraction)?;
        Ok(d)
    }
}

#[pyfunction]
#[pyo3(signature = (frame, horizon=15, window_len=32, split=0.7))]
fn prepare(frame: &Frame, horizon: usize, window_len: usize, split: f64) -> PyResult<Dataset> {
    let options = PipelineOptions {
        horizon,
        window_len,
        train_fraction: split,
    };
    let p = data::prepare(&frame.inner, &options).map_err(err)?;
    Ok(Dataset {
        train: SampleSet { inner: p.train },
        test: SampleSet { inner: p.test },
        stats: p.stats,
        summary: p.summary,
    })
}

/// The convolutional network.
#[pyclass(module = "pystockconv", skip_from_py_object)]
#[derive(Clone)]
struct Model {
    inner: nn::Model,
}

#[pymethods]
impl Model {
    /// Three conv layers (32/64/128 filters), dense 128 and 256, sigmoid output.
    #[staticmethod]
    #[pyo3(signature = (window_len=32, dropout=0.5, seed=0))]
    fn standard(window_len: usize, dropout: f64, seed: u64) -> PyResult<Self> {
        Self::build(ModelConfig::standard(window_len, dropout), seed)
    }

    /// Same layer pattern with custom widths.
    #[staticmethod]
    #[pyo3(signature = (channels, window_len, filters, dense, dropout=0.0, seed=0))]
    fn stack(
        channels: usize,
        window_len: usize,
        filters: [usize; 3],
        dense: [usize; 2],
        dropout: f64,
        seed: u64,
    ) -> PyResult<Self> {
        Self::build(ModelConfig::stack(channels, window_len, filters, dense, dropout), seed)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: store::load_checkpoint(path).map_err(err)?.model,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let ckpt = Checkpoint {
            model: self.inner.clone(),
            hyper: HyperParams::default(),
            best_epoch: 0,
            optimizer: None,
        };
        store::save_checkpoint(path, &ckpt).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn window_len(&self) -> usize {
        self.inner.config().window_len
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.param_names()
    }

    /// Flattened values of every parameter tensor, in `param_names` order.
    fn parameters(&self) -> Vec<Vec<f64>> {
        self.inner.tensors().iter().map(|t| t.to_vec()).collect()
    }

    /// Probability of label 1 for one window (channel-major rows), dropout off.
    fn predict_window(&self, window: Vec<Vec<f64>>) -> PyResult<f64> {
        let map = feature_map(window)?;
        let mut rng = rand_chacha::ChaCha8Rng::from_seed([0; 32]);
        let (p, _) = nn::model_forward(&map, &self.inner, Mode::Infer, &mut rng).map_err(err)?;
        Ok(p)
    }

    fn predict(&self, samples: &SampleSet) -> PyResult<Vec<f64>> {
        trainer::predict(&self.inner, &samples.inner).map_err(err)
    }

    /// Gradient check on one window; dropout must be off.
    #[pyo3(signature = (window, label, epsilon=1e-5))]
    fn grad_check<'py>(
        &self,
        py: Python<'py>,
        window: Vec<Vec<f64>>,
        label: u8,
        epsilon: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let opts = GradCheckOptions {
            epsilon,
            ..GradCheckOptions::default()
        };
        let r = trainer::grad_check(&self.inner, &feature_map(window)?, label, &opts).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("max_rel_error", r.max_rel_error)?;
        d.set_item("max_abs_error", r.max_abs_error)?;
        d.set_item("checked", r.checked)?;
        d.set_item("kinks", r.kinks)?;
        d.set_item("worst", r.worst.map(|w| format!("{}[{}]", w.param, w.index)))?;
        Ok(d)
    }
}

impl Model {
    fn build(config: ModelConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: nn::init_model(config, seed).map_err(err)?,
        })
    }
}

/// Trains a copy of `model`; returns the best-validation model and the
/// per-epoch history as a list of dicts.
#[pyfunction]
#[pyo3(signature = (
    model, train, test=None, *, max_epochs=25, batch_size=1000, patience=5,
    early_stopping=true, seed=0, lr=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8,
    threshold=0.5
))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    model: &Model,
    train: &SampleSet,
    test: Option<&SampleSet>,
    max_epochs: usize,
    batch_size: usize,
    patience: usize,
    early_stopping: bool,
    seed: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    threshold: f64,
) -> PyResult<(Model, Vec<Bound<'py, PyDict>>)> {
    let config = TrainConfig {
        max_epochs,
        patience,
        batch_size,
        early_stopping,
        seed,
        hyper: HyperParams {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            bias_correction: false,
        },
        threshold,
        ..TrainConfig::default()
    };
    let outcome = trainer::train(model.inner.clone(), &train.inner, test.map(|t| &t.inner), &config)
        .map_err(err)?;
    let history = outcome
        .history
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("train_acc", r.train_acc)?;
            d.set_item("val_loss", r.val_loss)?;
            d.set_item("val_acc", r.val_acc)?;
            d.set_item("test_loss", r.test_loss)?;
            d.set_item("test_acc", r.test_acc)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((Model { inner: outcome.model }, history))
}

fn metrics_dict<'py>(py: Python<'py>, cm: &metrics::ConfusionMatrix) -> PyResult<Bound<'py, PyDict>> {
    let m = cm.metrics();
    let d = PyDict::new(py);
    d.set_item("tp", cm.tp)?;
    d.set_item("fp", cm.fp)?;
    d.set_item("tn", cm.tn)?;
    d.set_item("fn", cm.fn_)?;
    d.set_item("accuracy", m.accuracy.value)?;
    d.set_item("precision", m.precision.value)?;
    d.set_item("recall", m.recall.value)?;
    d.set_item("f1", m.f1.value)?;
    Ok(d)
}

/// Confusion counts, metrics and mean loss of `model` on `samples`.
#[pyfunction]
#[pyo3(signature = (model, samples, threshold=0.5))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &Model,
    samples: &SampleSet,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let e = trainer::evaluate(&model.inner, &samples.inner, threshold).map_err(err)?;
    let d = metrics_dict(py, &e.confusion)?;
    d.set_item("loss", e.loss)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (preds, labels, threshold=0.5))]
fn classification_metrics<'py>(
    py: Python<'py>,
    preds: Vec<f64>,
    labels: Vec<u8>,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let cm = metrics::confusion(&preds, &labels, threshold).map_err(err)?;
    metrics_dict(py, &cm)
}

#[pyfunction]
fn bce_loss(preds: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::bce_loss(&preds, &labels).map_err(err)
}

/// "Same"-padded convolution of `input` (`channels x length`) with weights
/// shaped `[out][in][kernel]`.
#[pyfunction]
#[pyo3(signature = (input, weights, bias, activation="identity"))]
fn conv1d(
    input: Vec<Vec<f64>>,
    weights: Vec<Vec<Vec<f64>>>,
    bias: Vec<f64>,
    activation: &str,
) -> PyResult<Vec<Vec<f64>>> {
    let out = weights.len();
    let inp = weights.first().map_or(0, Vec::len);
    let k = weights.first().and_then(|w| w.first()).map_or(0, Vec::len);
    let flat: Vec<f64> = weights.into_iter().flatten().flatten().collect();
    let w = Array3::from_shape_vec((out, inp, k), flat).map_err(err)?;
    let layer = ConvLayer::new(w, Array1::from(bias), self::activation(activation)?).map_err(err)?;
    let y = nn::conv1d_forward(&feature_map(input)?, &layer).map_err(err)?;
    Ok(y.to_rows())
}

type Pooled = (Vec<Vec<f64>>, Vec<Vec<usize>>);

/// Non-overlapping max-pool; returns the pooled rows and argmax positions.
#[pyfunction]
fn maxpool1d(input: Vec<Vec<f64>>, pool: usize) -> PyResult<Pooled> {
    let (y, idx) = nn::maxpool1d_forward(&feature_map(input)?, pool).map_err(err)?;
    Ok((y.to_rows(), idx.outer_iter().map(|r| r.to_vec()).collect()))
}

/// Optimizer state for a single flat parameter vector.
#[pyclass(module = "pystockconv")]
struct Optimizer {
    state: AdamState,
    hyper: HyperParams,
    kind: String,
}

#[pymethods]
impl Optimizer {
    #[new]
    #[pyo3(signature = (size, kind="adam", lr=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8))]
    fn new(size: usize, kind: &str, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> PyResult<Self> {
        if !matches!(kind, "adam" | "momentum" | "rmsprop") {
            return Err(err(format!("unknown optimizer '{kind}'")));
        }
        let hyper = HyperParams {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            bias_correction: false,
        };
        hyper.validate().map_err(err)?;
        Ok(Self {
            state: AdamState::new(&vec![0.0; size]),
            hyper,
            kind: kind.to_string(),
        })
    }

    /// Applies one update and returns the new parameters.
    fn step(&mut self, params: Vec<f64>, grads: Vec<f64>) -> PyResult<Vec<f64>> {
        let mut w = params;
        let step = match self.kind.as_str() {
            "momentum" => optim::momentum_step,
            "rmsprop" => optim::rmsprop_step,
            _ => optim::adam_step,
        };
        step(&mut w, &grads, &mut self.state, &self.hyper).map_err(err)?;
        Ok(w)
    }
}

#[pymodule]
fn pystockconv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("StockconvError", m.py().get_type::<StockconvError>())?;
    m.add_class::<Frame>()?;
    m.add_class::<SampleSet>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Optimizer>()?;
    m.add_function(wrap_pyfunction!(label_high, m)?)?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(bce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(conv1d, m)?)?;
    m.add_function(wrap_pyfunction!(maxpool1d, m)?)?;
    Ok(())
}
