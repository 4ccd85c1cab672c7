//! Optimization loop: one source and one target image per step, momentum SGD
//! with weight decay, a two-stage learning rate, ablation switches and
//! checkpointing.

mod batch;
mod checkpoint;
mod config;
mod sgd;
mod trainer;

pub use batch::{batch_indices, compose_batch};
pub use checkpoint::{
    file_digest, load_checkpoint, load_for_inference, save_checkpoint, Checkpoint, DatasetDigests, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{lr_at, TrainConfig};
pub use sgd::{clip_global_norm, sgd_step};
pub use trainer::{train, LogRow, StepReport, TrainOutcome, Trainer, LOG_HEADER};

use crate::adaptation::AdaptationError;
use crate::detector::DetectorError;
use crate::synthdata::DataError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Adaptation(#[from] AdaptationError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss or gradient at iteration {iter}: {detail}")]
    NonFinite { iter: usize, detail: String },
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        Self::Detector(e.into())
    }
}
