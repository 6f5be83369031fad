//! Mini-batch training with early stopping, evaluation, and finite-difference
//! gradient verification.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{floor_fraction, SampleSet};
use crate::metrics::{self, bce_sample, classify, ConfusionMatrix, Metrics, MetricsError};
use crate::nn::{
    model_backward, model_forward_batch, predict_batch, FeatureMap, GradientSet, Mode, Model,
    ModelError, Params,
};
use crate::optim::{adam_step, AdamState, HyperParams, OptimError};

/// Samples pushed through forward/backward at once inside a batch. Gradient
/// sums are accumulated chunk by chunk in a fixed order.
const CHUNK: usize = 125;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{0} set is empty")]
    EmptyData(&'static str),
    #[error("data windows have {data} channels x {data_len} steps but the model expects {model} x {model_len}")]
    InputShape {
        data: usize,
        data_len: usize,
        model: usize,
        model_len: usize,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite value while checking {param}[{index}]")]
    NonFiniteCheck { param: String, index: usize },
    #[error("gradient check needs a model without dropout")]
    DropoutEnabled,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub early_stopping: bool,
    pub seed: u64,
    pub hyper: HyperParams,
    /// Chronological tail of the training windows held out for monitoring.
    pub validation_fraction: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 25,
            patience: 5,
            batch_size: 1000,
            early_stopping: true,
            seed: 0,
            hyper: HyperParams::default(),
            validation_fraction: 0.1,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!(
                "validation_fraction {} is outside (0, 1)",
                self.validation_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} is outside [0, 1]", self.threshold));
        }
        self.hyper.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean loss over the epoch's training batches (dropout active).
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub test_loss: Option<f64>,
    pub test_acc: Option<f64>,
    /// Seconds; never written to history files.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,test_loss,test_acc";

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_loss).collect()
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.records.iter().map(|r| r.val_loss).reduce(f64::min)
    }

    /// One row per epoch; timing is omitted so reruns are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.train_acc,
                r.val_loss,
                r.val_acc,
                opt(r.test_loss),
                opt(r.test_acc)
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyStop {
    Continue,
    Stop,
}

/// Stops once the last `patience` epochs all failed to beat (strictly) the
/// best validation loss recorded before them.
pub fn early_stop_check(val_losses: &[f64], patience: usize) -> EarlyStop {
    let Some(best) = val_losses
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if v >= b || v.is_nan() => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
    else {
        return EarlyStop::Continue;
    };
    if val_losses.len() - 1 - best >= patience {
        EarlyStop::Stop
    } else {
        EarlyStop::Continue
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
    pub loss: f64,
}

/// Inference-mode predictions for every sample, in order.
pub fn predict(model: &Model, data: &SampleSet) -> Result<Vec<f64>, TrainError> {
    check_shape(model, data)?;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(CHUNK * 2) {
        let refs: Vec<&FeatureMap> = chunk.iter().map(|s| &s.window).collect();
        out.extend(predict_batch(&refs, model)?);
    }
    Ok(out)
}

/// Confusion matrix, metrics and mean loss with dropout off.
pub fn evaluate(model: &Model, data: &SampleSet, threshold: f64) -> Result<Evaluation, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData("evaluation"));
    }
    let preds = predict(model, data)?;
    let labels = data.labels();
    let confusion = metrics::confusion(&preds, &labels, threshold)?;
    Ok(Evaluation {
        metrics: confusion.metrics(),
        loss: metrics::bce_loss(&preds, &labels)?,
        confusion,
    })
}

fn check_shape(model: &Model, data: &SampleSet) -> Result<(), TrainError> {
    let cfg = model.config();
    if data.is_empty() {
        return Ok(());
    }
    if data.channels() != cfg.in_channels || data.window_len != cfg.window_len {
        return Err(TrainError::InputShape {
            data: data.channels(),
            data_len: data.window_len,
            model: cfg.in_channels,
            model_len: cfg.window_len,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model,
    /// Optimizer state at that same epoch.
    pub optimizer: AdamState,
    pub history: TrainHistory,
}

pub fn train(
    model: Model,
    train_set: &SampleSet,
    test_set: Option<&SampleSet>,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_from(model, None, train_set, test_set, config, &mut |_| {})
}

/// Full training entry point: optional resumed optimizer state and a
/// per-epoch observer.
pub fn train_from(
    mut model: Model,
    optimizer: Option<AdamState>,
    train_set: &SampleSet,
    test_set: Option<&SampleSet>,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    check_shape(&model, train_set)?;
    if let Some(test) = test_set {
        check_shape(&model, test)?;
    }
    let n_val = floor_fraction(train_set.len(), config.validation_fraction);
    if n_val == 0 || n_val >= train_set.len() {
        return Err(TrainError::InvalidConfig(format!(
            "validation fraction {} of {} windows leaves an empty partition",
            config.validation_fraction,
            train_set.len()
        )));
    }
    let (fit, val) = train_set.split_tail(n_val);
    let test_set = test_set.filter(|t| !t.is_empty());

    let mut opt = optimizer.unwrap_or_else(|| AdamState::new(&model));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Model, AdamState)> = None;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_no, batch) in order.chunks(config.batch_size).enumerate() {
            let (grads, batch_loss, batch_correct) =
                batch_gradients(&model, &fit, batch, config.threshold, &mut rng)?;
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no + 1,
                });
            }
            adam_step(&mut model, &grads, &mut opt, &config.hyper)?;
            loss_sum += batch_loss;
            correct += batch_correct;
        }

        let val_eval = evaluate(&model, &val, config.threshold)?;
        let test_eval = test_set
            .map(|t| evaluate(&model, t, config.threshold))
            .transpose()?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / fit.len() as f64,
            train_acc: correct as f64 / fit.len() as f64,
            val_loss: val_eval.loss,
            val_acc: val_eval.metrics.accuracy.value,
            test_loss: test_eval.as_ref().map(|e| e.loss),
            test_acc: test_eval.as_ref().map(|e| e.metrics.accuracy.value),
            wall_time: started.elapsed().as_secs_f64(),
        };
        observer(&record);
        let improved = best.as_ref().is_none_or(|(b, _, _)| record.val_loss < *b);
        if improved {
            best = Some((record.val_loss, model.clone(), opt.clone()));
            history.best_epoch = epoch;
        }
        history.records.push(record);
        if config.early_stopping
            && early_stop_check(&history.val_losses(), config.patience) == EarlyStop::Stop
        {
            history.stopped_early = epoch < config.max_epochs;
            break;
        }
    }

    let (_, model, optimizer) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        optimizer,
        history,
    })
}

/// Mean gradient over one batch plus the summed loss and correct count.
fn batch_gradients<R: Rng>(
    model: &Model,
    data: &SampleSet,
    batch: &[usize],
    threshold: f64,
    rng: &mut R,
) -> Result<(GradientSet, f64, usize), TrainError> {
    let mut grads = GradientSet::zeros_like(model);
    let mut loss = 0.0;
    let mut correct = 0;
    for chunk in batch.chunks(CHUNK) {
        let refs: Vec<&FeatureMap> = chunk.iter().map(|&i| &data.samples[i].window).collect();
        let labels: Vec<u8> = chunk.iter().map(|&i| data.samples[i].label).collect();
        let cache = model_forward_batch(&refs, model, Mode::Train, rng)?;
        for (&p, &y) in cache.probabilities().iter().zip(&labels) {
            loss += bce_sample(p, y);
            correct += usize::from(classify(p, threshold) == y);
        }
        grads.add_assign(&model_backward(&cache, &labels, model)?);
    }
    grads.scale(1.0 / batch.len() as f64);
    Ok((grads, loss, correct))
}

/// Relative-error denominators below this are clamped up to it, so entries
/// whose true gradient is ~0 are judged on absolute error instead.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Check a random subset of this many parameters; `None` checks all.
    pub max_params: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_params: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamAddress {
    pub param: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Loss at the unperturbed parameters.
    pub loss: f64,
    pub worst: Option<ParamAddress>,
    pub analytic: f64,
    pub numeric: f64,
    /// Entries compared.
    pub checked: usize,
    /// Entries left out because the probe crossed a kink (a rectifier
    /// changed branch or a pool window changed winner), where the loss is
    /// not differentiable and central differences are meaningless.
    pub kinks: usize,
}

/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares backpropagated gradients with central differences
/// `(J(w + eps) - J(w - eps)) / 2 eps` of the cross-entropy loss, skipping
/// entries whose probe crosses a kink of the network.
pub fn grad_check(
    model: &Model,
    sample: &FeatureMap,
    label: u8,
    options: &GradCheckOptions,
) -> Result<GradCheckReport, TrainError> {
    grad_check_with(model, sample, label, options, |_| {})
}

/// [`grad_check`] with a hook that may alter the analytic gradients before
/// comparison (used to confirm the check detects a broken backward pass).
pub fn grad_check_with(
    model: &Model,
    sample: &FeatureMap,
    label: u8,
    options: &GradCheckOptions,
    tamper: impl FnOnce(&mut GradientSet),
) -> Result<GradCheckReport, TrainError> {
    if !(options.epsilon > 0.0 && options.epsilon.is_finite()) {
        return Err(TrainError::InvalidConfig(format!(
            "epsilon {} must be positive",
            options.epsilon
        )));
    }
    if model.has_dropout() {
        return Err(TrainError::DropoutEnabled);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let cache = model_forward_batch(&[sample], model, Mode::Train, &mut rng)?;
    let mut analytic = model_backward(&cache, &[label], model)?;
    tamper(&mut analytic);

    let names = model.param_names();
    let sizes = model.shapes();
    let mut addresses: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(t, &n)| (0..n).map(move |i| (t, i)))
        .collect();
    if let Some(limit) = options.max_params {
        if limit < addresses.len() {
            addresses.shuffle(&mut rng);
            addresses.truncate(limit);
            addresses.sort_unstable();
        }
    }

    let loss_at = |m: &Model| -> Result<(f64, Vec<usize>), TrainError> {
        let cache = model_forward_batch(&[sample], m, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(0))?;
        let loss = metrics::bce_loss(cache.probabilities(), &[label])?;
        Ok((loss, cache.kink_pattern(m)))
    };
    let (loss, pattern) = loss_at(model)?;
    let analytic_tensors = analytic.tensors();
    let mut probe = model.clone();
    let eps = options.epsilon;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        loss,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        kinks: 0,
    };
    for (t, i) in addresses {
        let original = probe.tensors()[t][i];
        probe.tensors_mut()[t][i] = original + eps;
        let (plus, plus_pattern) = loss_at(&probe)?;
        probe.tensors_mut()[t][i] = original - eps;
        let (minus, minus_pattern) = loss_at(&probe)?;
        probe.tensors_mut()[t][i] = original;
        if plus_pattern != pattern || minus_pattern != pattern {
            report.kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic_tensors[t][i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(TrainError::NonFiniteCheck {
                param: names[t].clone(),
                index: i,
            });
        }
        let err = relative_error(a, numeric);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.analytic = a;
            report.numeric = numeric;
            report.worst = Some(ParamAddress {
                param: names[t].clone(),
                index: i,
            });
        }
    }
    Ok(report)
}
