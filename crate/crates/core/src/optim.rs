//! Momentum, RMSprop and Adam parameter updates.
//!
//! Adam follows the plain moment recurrences without bias correction:
//!
//! ```text
//! m_t = beta1 * m_{t-1} + (1 - beta1) * g
//! s_t = beta2 * s_{t-1} + (1 - beta2) * g^2
//! w  -= alpha / (sqrt(s_t) + eps) * m_t
//! ```
//!
//! Bias correction can be switched on through [`HyperParams::bias_correction`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Params;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("gradient has {got} tensors of sizes {got_sizes:?}, parameters have {expected_sizes:?}")]
    ShapeMismatch {
        got: usize,
        got_sizes: Vec<usize>,
        expected_sizes: Vec<usize>,
    },
    #[error("invalid hyper-parameter: {0}")]
    InvalidHyperParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub learning_rate: f64,
    /// Decay of the first-moment (momentum) accumulator.
    pub beta1: f64,
    /// Decay of the second-moment (squared gradient) accumulator.
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub bias_correction: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            bias_correction: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::InvalidHyperParams(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad(format!("beta1 {} must be in [0, 1)", self.beta1));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("beta2 {} must be in [0, 1)", self.beta2));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        Ok(())
    }
}

/// First and second moment accumulators, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    /// Zeroed accumulators shaped like `params`.
    pub fn new<P: Params + ?Sized>(params: &P) -> Self {
        let shapes = params.shapes();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            s: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    fn check<P: Params + ?Sized, G: Params + ?Sized>(&self, params: &P, grads: &G) -> Result<(), OptimError> {
        let expected = params.shapes();
        let got = grads.shapes();
        let state_m: Vec<usize> = self.m.iter().map(Vec::len).collect();
        let state_s: Vec<usize> = self.s.iter().map(Vec::len).collect();
        if got != expected || state_m != expected || state_s != expected {
            return Err(OptimError::ShapeMismatch {
                got: got.len(),
                got_sizes: got,
                expected_sizes: expected,
            });
        }
        Ok(())
    }
}

/// `m = b1 m + (1 - b1) g; w -= alpha m`
pub fn momentum_step<P, G>(
    params: &mut P,
    grads: &G,
    state: &mut AdamState,
    hp: &HyperParams,
) -> Result<(), OptimError>
where
    P: Params + ?Sized,
    G: Params + ?Sized,
{
    hp.validate()?;
    state.check(params, grads)?;
    let (b1, lr) = (hp.beta1, hp.learning_rate);
    for ((w, g), m) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(&mut state.m) {
        for ((w, &g), m) in w.iter_mut().zip(g).zip(m.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *w -= lr * *m;
        }
    }
    state.step += 1;
    Ok(())
}

/// `s = b2 s + (1 - b2) g^2; w -= alpha / (sqrt(s) + eps) * g`
pub fn rmsprop_step<P, G>(
    params: &mut P,
    grads: &G,
    state: &mut AdamState,
    hp: &HyperParams,
) -> Result<(), OptimError>
where
    P: Params + ?Sized,
    G: Params + ?Sized,
{
    hp.validate()?;
    state.check(params, grads)?;
    let (b2, lr, eps) = (hp.beta2, hp.learning_rate, hp.epsilon);
    for ((w, g), s) in params.tensors_mut().into_iter().zip(grads.tensors()).zip(&mut state.s) {
        for ((w, &g), s) in w.iter_mut().zip(g).zip(s.iter_mut()) {
            *s = b2 * *s + (1.0 - b2) * g * g;
            *w -= lr / (s.sqrt() + eps) * g;
        }
    }
    state.step += 1;
    Ok(())
}

/// One Adam update over every tensor.
pub fn adam_step<P, G>(
    params: &mut P,
    grads: &G,
    state: &mut AdamState,
    hp: &HyperParams,
) -> Result<(), OptimError>
where
    P: Params + ?Sized,
    G: Params + ?Sized,
{
    hp.validate()?;
    state.check(params, grads)?;
    state.step += 1;
    let (b1, b2, lr, eps) = (hp.beta1, hp.beta2, hp.learning_rate, hp.epsilon);
    let (c1, c2) = if hp.bias_correction {
        let t = state.step as i32;
        (1.0 - b1.powi(t), 1.0 - b2.powi(t))
    } else {
        (1.0, 1.0)
    };
    let tensors = params.tensors_mut().into_iter().zip(grads.tensors());
    for ((w, g), (m, s)) in tensors.zip(state.m.iter_mut().zip(state.s.iter_mut())) {
        for (((w, &g), m), s) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(s.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *s = b2 * *s + (1.0 - b2) * g * g;
            let (m_hat, s_hat) = (*m / c1, *s / c2);
            *w -= lr / (s_hat.sqrt() + eps) * m_hat;
        }
    }
    Ok(())
}
