//! Training, evaluation, inference, checkpoints, dataset ingestion and run configuration.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod train;

use m3fas_numerics::NumericsError;
use thiserror::Error;

use crate::channel::ChannelError;
use crate::echo::PipelineError;
use crate::metrics::MetricsError;
use crate::model::{Modality, ModelError, Route};
use crate::signal::SignalError;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{RunConfig, SplitConfig, SplitMode, ThresholdMode, TrainConfig, TrainingMode};
pub use data::{load_dataset, make_splits, Dataset, Example, Splits};
pub use train::{
    evaluate, evaluate_at, infer, select_thresholds, train, BestTracker, EpochLog, EvalReport,
    HeadThresholds, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{0} split is empty")]
    EmptySplit(String),
    #[error("route `{route}` needs the {modality} input, which was not given")]
    MissingModality { route: Route, modality: Modality },
    #[error("recording could not be preprocessed: {0}")]
    Preprocess(PipelineError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    /// Process exit status: 2 invalid input, 3 missing modality, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::MissingModality { .. }
            | HarnessError::Model(ModelError::MissingInput { .. }) => 3,
            HarnessError::NonFiniteLoss { .. } | HarnessError::Numerics(_) => 4,
            HarnessError::Model(ModelError::Numerics(_)) => 4,
            _ => 2,
        }
    }
}
