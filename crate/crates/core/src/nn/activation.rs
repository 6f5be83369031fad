use serde::{Deserialize, Serialize};

/// Negative-branch slope used for LeakyReLU unless configured otherwise.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    LeakyRelu { slope: f64 },
    Sigmoid,
    Identity,
}

impl ActivationKind {
    pub fn leaky() -> Self {
        ActivationKind::LeakyRelu {
            slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn is_valid(&self) -> bool {
        match *self {
            ActivationKind::LeakyRelu { slope } => slope > 0.0 && slope < 1.0,
            _ => true,
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            ActivationKind::Sigmoid => sigmoid(x),
            ActivationKind::Identity => x,
        }
    }

    /// ReLU and LeakyReLU have a kink at 0.
    pub fn is_piecewise(&self) -> bool {
        matches!(self, ActivationKind::Relu | ActivationKind::LeakyRelu { .. })
    }

    /// Derivative at pre-activation `x`. At exactly 0 the rectifiers take
    /// their negative-branch value.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            ActivationKind::Identity => 1.0,
        }
    }
}

/// Logistic function, evaluated without overflow for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation_forward(x: f64, kind: ActivationKind) -> f64 {
    kind.apply(x)
}

pub fn activation_grad(x: f64, kind: ActivationKind) -> f64 {
    kind.derivative(x)
}
