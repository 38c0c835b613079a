//! Convolutional classifier: shape-checked forward pass, exact reverse-mode
//! gradients, mini-batch gradient descent, grid search and checkpoints.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::imaging::{ImagingError, RasterImage};

pub mod checkpoint;
mod dataset;
pub mod gradcheck;
mod grid;
mod kernels;
mod network;
mod predict;
mod real;
mod spec;
mod train;

pub use checkpoint::CheckpointError;
pub use dataset::{evaluation_case, training_sample};
pub use grid::{grid_search, select_best, validation_accuracy, GridCell, GridOutcome, GridSpace};
pub use network::{LayerParams, Network, Parameters, Workspace};
pub use predict::{predict_case, predict_prepared, prepare_case, PreparedCase, Prediction, ROI_CONTEXT};
pub use real::Real;
pub use spec::{Activation, InputShape, LayerSpec, NetworkSpec, Shape};
pub use train::{train, AugmentPolicy, EpochStats, TrainConfig, TrainOptions, TrainOutcome, TrainingSample};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("layer {layer}: {reason}")]
    Shape { layer: usize, reason: String },
    #[error("invalid network: {0}")]
    InvalidSpec(String),
    #[error("label {0} is not a known class")]
    InvalidLabel(usize),
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("every grid cell failed")]
    NoViableConfig,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Copies an image into an HWC tensor in unit scale. Byte images are
/// divided by 255.
pub fn image_tensor<T: Real>(img: &RasterImage, out: &mut Vec<T>) {
    out.clear();
    match img.bytes() {
        Some(b) => {
            let table: [T; 256] = core::array::from_fn(|v| T::from_f64(v as f64 / 255.0));
            out.extend(b.iter().map(|&v| table[usize::from(v)]));
        }
        None => out.extend(img.units().unwrap_or(&[]).iter().map(|&v| T::from_f64(v))),
    }
}
