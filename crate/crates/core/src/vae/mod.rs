//! Desk-scale categorical VAE: 30 categorical latents with 10 categories
//! each, a one-hidden-layer MLP encoder and decoder, trained on the negative
//! ELBO with any of the estimators.

pub mod checkpoint;
mod config;
mod data;
mod model;
mod optim;
mod train;

use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::estimators::EstimatorError;
use crate::tensor::TensorError;
use crate::variance::VarianceError;

pub use config::{DatasetSpec, TrainConfig};
pub use data::{
    default_data_dir, load_idx_images, load_idx_labels, load_mnist, synth_dataset, synth_dataset_with, TRAIN_IMAGES,
    TRAIN_LABELS,
};
pub use model::{
    elbo_loss, elbo_loss_with_noise, loss_and_grads, ElboTerms, LossBreakdown, VaeModel, VaeSnapshotProbe, CATEGORIES,
    ENCODER_TENSORS, LATENTS, LATENT_DIM, PARAM_NAMES, PIXELS,
};
pub use optim::{adam_step, temperature_schedule, AdamState, TemperatureSchedule};
pub use train::{
    checkpoint_path, final_summary, load_dataset, metrics_rows, run_grid, run_label, snapshot_probe, step_estimator,
    train, train_all, write_metrics_csv, EpochMetrics, GridRow, MetricsRow, RunStatus, TrainRun, DIVERGENCE_EPOCHS,
    DIVERGENCE_FACTOR,
};

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("non-finite value in the {term} term")]
    NonFinite { term: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: byte offset {offset}: {msg}")]
    Idx { path: PathBuf, offset: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Variance(#[from] VarianceError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<TensorError> for VaeError {
    fn from(e: TensorError) -> Self {
        VaeError::Autodiff(e.into())
    }
}
