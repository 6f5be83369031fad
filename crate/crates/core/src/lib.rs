//! A small 1-D convolutional network for next-window price direction,
//! written from scratch on top of `ndarray`.
//!
//! The pipeline turns OHLC bars into normalized 4-channel windows, the
//! network is trained with mini-batch Adam, and results are written as
//! plain CSV/JSON plus a binary checkpoint.

pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod persist;
pub mod synthetic;
pub mod train;

pub use data::{
    prepare, NormStats, PipelineOptions, PrepareSummary, Prepared, Sample, SampleSet,
};
pub use error::Error;
pub use metrics::{ConfusionMatrix, Metrics};
pub use nn::{init_model, FeatureMap, Model, ModelConfig};
pub use optim::{AdamState, HyperParams};
pub use train::{evaluate, train, TrainConfig, TrainHistory, TrainOutcome};
