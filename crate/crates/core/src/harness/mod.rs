//! Training, checkpointing, evaluation, and the one-factor-at-a-time experiment grid.

mod checkpoint;
mod config;
mod evaluate;
mod grid;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{lr_schedule, ExperimentConfig, CONFIG_KEYS};
pub use evaluate::{evaluate, evaluate_model, latest_checkpoint, score_frames};
pub use grid::{expand_grid, run_grid, GridCell, GridOutcome, GridReport};
pub use model::{frame_input, load_split, FramePass, Model, SplitData};
pub use train::{train, EpochStats, StepRecord, TrainState, Trainer, EXTRACTOR_SEED};

use crate::dataset::DatasetError;
use crate::flow::FlowError;
use crate::metrics::MetricError;
use crate::objectives::LossError;
use crate::person::ReprError;
use crate::tryon::TryonError;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Representation(#[from] ReprError),
    #[error(transparent)]
    Network(#[from] TryonError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("non-finite loss at epoch {epoch}, step {step} (batch: {batch})")]
    NanLoss { epoch: usize, step: usize, batch: String },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("i/o error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Dataset(_) => "dataset",
            Self::Representation(_) => "representation",
            Self::Network(_) => "network",
            Self::Loss(_) => "loss",
            Self::Flow(_) => "flow",
            Self::Metric(_) => "metric",
            Self::NanLoss { .. } => "nan_loss",
            Self::LayoutMismatch(_) => "layout_mismatch",
            Self::Checkpoint { .. } => "checkpoint",
            Self::Io { .. } => "io",
        }
    }
}
