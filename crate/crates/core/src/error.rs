//! Errors raised by the model, training, and evaluation layers.

use thiserror::Error;

use crate::data::DataError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("backbone is not fully frozen; freeze it before training the autoencoder")]
    UnfrozenBackbone,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("feature shape mismatch: expected {expected:?}, got {got:?}")]
    FeatureShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("feature map must be normalized before entering the autoencoder")]
    NotNormalized,
    #[error("latent metric needs at least {needed} {what}, got {got}")]
    TooFewForMetric {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
