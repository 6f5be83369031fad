//! From-scratch 1-D convolutional network: layers, forward pass and
//! hand-derived backpropagation.

mod activation;
mod feature_map;
mod layers;
mod model;

use thiserror::Error;

pub use activation::{activation_forward, activation_grad, sigmoid, ActivationKind, DEFAULT_LEAKY_SLOPE};
pub use feature_map::FeatureMap;
pub use layers::{
    conv1d_forward, dense_forward, dropout_forward, maxpool1d_forward, ConvLayer, DenseLayer, Mode,
};
pub use model::{
    backward_from_logit_grad, init_model, model_backward, model_forward, model_forward_batch,
    predict_batch, ConvSpec, DenseSpec, ForwardCache, GradientSet, Model, ModelConfig, Params,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{layer}: expected {expected} input channels, got {got}")]
    ChannelMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("{layer}: expected input length {expected}, got {got}")]
    LengthMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("{layer}: expected {expected} values, got {got}")]
    ShapeMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("{layer}: pool size {pool} does not fit length {length}")]
    PoolTooLarge {
        layer: String,
        length: usize,
        pool: usize,
    },
    #[error("feature map must be non-empty, got {channels}x{length}")]
    EmptyFeatureMap { channels: usize, length: usize },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("dropout rate {0} is outside [0, 1)")]
    BadDropout(f64),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("stale forward cache: {0}")]
    StaleCache(String),
    #[error("empty batch")]
    EmptyBatch,
}
