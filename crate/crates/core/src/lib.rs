//! Occlusion-robust image classification toolkit.
//!
//! A frozen CNN backbone is split into a feature extractor and classifier
//! head; a small convolutional autoencoder sits between them and learns to
//! reconstruct occlusion-corrupted feature maps under a four-term loss
//! (reconstruction, intra-class latent, inter-class contrastive,
//! classification). Everything runs on a from-scratch f64 tensor engine with
//! reverse-mode autodiff, over a deterministic synthetic shape corpus with
//! controlled occluders.

pub mod ae;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;
