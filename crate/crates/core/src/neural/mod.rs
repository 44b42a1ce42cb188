//! Conditional continuous normalizing flow with a distance head on a shared
//! trunk, trained with a hybrid likelihood and field-regression loss.

mod checkpoint;
mod density;
mod loss;
mod matrix;
mod model;
mod provider;
mod tape;
mod train;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use density::{integrate_density, DensityIntegral, DensityQuadrature};
pub use loss::{compute_losses, loss_and_gradients, Batch, BatchRecord, CollocationPoint, LossReport, TrainingConfig};
pub use matrix::Matrix;
pub use model::{positional_encoding, Arch, FlowModel, MonteCarloEstimate};
pub use provider::{LearnedDirectProvider, LearnedMcProvider};
pub use tape::{Eval, EvalValue, Gradients, Ops, Tape};
pub use train::{train, AdamState, HistoryRow, TrainError, Trainer};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("expected {expected} joint values, got {got}")]
    DofMismatch { expected: usize, got: usize },
    #[error("scene has {obstacles} obstacles but the model has {slots} slots")]
    SceneTooLarge { obstacles: usize, slots: usize },
    #[error("flow state became non-finite at step {step}")]
    Divergence { step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss{}", record.map(|r| format!(" at record {r}")).unwrap_or_default())]
    NonFiniteLoss { record: Option<usize> },
    #[error("non-finite {0}")]
    NonFinite(String),
}
