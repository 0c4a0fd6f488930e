//! Multi-view high-resolution convolutional screening classifier.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode differentiation and the layer primitives.
//! - [`data`]: exam ingestion, preprocessing, patient splits and a synthetic exam generator.
//! - [`model`]: the four-column network with tied columns, layer-skip planning and checkpoints.
//! - [`train`]: Adam, the epoch loop with best-model selection, evaluation and sweeps.
//! - [`metrics`]: AUCs, entropy confidence, high-confidence subsets, ensembles and kappa.
//! - [`saliency`]: entropy-gradient sensitivity maps and heatmap rendering.

pub mod data;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod saliency;
pub mod tensor;
pub mod train;
