//! Binary cross-entropy and confusion-matrix metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Predictions are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions but {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("no samples to score")]
    Empty,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Per-sample loss `-[y ln p + (1 - y) ln(1 - p)]` on the clamped prediction.
pub fn bce_sample(pred: f64, label: u8) -> f64 {
    let p = clamp_prob(pred);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Mean binary cross-entropy.
pub fn bce_loss(preds: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    check_lengths(preds, labels)?;
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total: f64 = preds.iter().zip(labels).map(|(&p, &y)| bce_sample(p, y)).sum();
    Ok(total / preds.len() as f64)
}

/// `d loss / d pred` of [`bce_sample`]: `(p - y) / (p (1 - p))`.
pub fn bce_grad(pred: f64, label: u8) -> f64 {
    let p = clamp_prob(pred);
    (p - f64::from(label)) / (p * (1.0 - p))
}

/// 1 when `pred >= threshold`.
pub fn classify(pred: f64, threshold: f64) -> u8 {
    u8::from(pred >= threshold)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, predicted: u8, actual: u8) {
        match (predicted, actual) {
            (1, 1) => self.tp += 1,
            (1, _) => self.fp += 1,
            (_, 1) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            accuracy: accuracy(self),
            precision: precision(self),
            recall: recall(self),
            f1: f1(self),
        }
    }
}

pub fn confusion(preds: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix, MetricsError> {
    check_lengths(preds, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in preds.iter().zip(labels) {
        cm.record(classify(p, threshold), y);
    }
    Ok(cm)
}

fn check_lengths(preds: &[f64], labels: &[u8]) -> Result<(), MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    Ok(())
}

/// A metric value; `degenerate` marks a zero denominator, reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratio {
    pub value: f64,
    pub degenerate: bool,
}

impl Ratio {
    fn of(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Ratio {
                value: 0.0,
                degenerate: true,
            }
        } else {
            Ratio {
                value: num / den,
                degenerate: false,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Ratio,
    pub precision: Ratio,
    pub recall: Ratio,
    pub f1: Ratio,
}

pub fn accuracy(cm: &ConfusionMatrix) -> Ratio {
    Ratio::of((cm.tp + cm.tn) as f64, cm.total() as f64)
}

pub fn precision(cm: &ConfusionMatrix) -> Ratio {
    Ratio::of(cm.tp as f64, (cm.tp + cm.fp) as f64)
}

pub fn recall(cm: &ConfusionMatrix) -> Ratio {
    Ratio::of(cm.tp as f64, (cm.tp + cm.fn_) as f64)
}

/// Harmonic mean of precision and recall.
pub fn f1(cm: &ConfusionMatrix) -> Ratio {
    let (p, r) = (precision(cm), recall(cm));
    let ratio = Ratio::of(2.0 * p.value * r.value, p.value + r.value);
    Ratio {
        degenerate: ratio.degenerate || p.degenerate || r.degenerate,
        ..ratio
    }
}
