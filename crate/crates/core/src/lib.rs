//! Unsupervised image segmentation with a W-Net: a fully convolutional
//! autoencoder whose bottleneck is a K-way soft segmentation trained by a
//! soft normalized-cut loss, followed by dense-CRF smoothing, contour-driven
//! hierarchical merging and region-benchmark evaluation.

pub mod affinity;
pub mod contour;
pub mod config;
pub mod crf;
pub mod error;
pub mod io;
pub mod metrics;
pub mod ncut;
pub mod pipeline;
pub mod nn;
pub mod resample;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ImageTensor, LabelMap, Rng};
