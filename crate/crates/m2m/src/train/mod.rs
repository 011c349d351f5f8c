//! Training and evaluation: the Poisson objective, count-forecast metrics,
//! the minibatch loop, and per-scenario reporting.

mod eval;
mod loss;
mod metrics;
mod trainer;

pub use eval::{evaluate, predict, CellMetrics, MetricsReport, OverallMetrics};
pub use loss::{joint_loss, poisson_loss, poisson_loss_node};
pub use metrics::{nmae, smape, MetricsError};
pub use trainer::{history_csv, train, train_resumable, EpochStats, TrainOutcome};

use crate::config::ConfigError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    /// The Poisson likelihood is only defined for strictly positive rates;
    /// a NaN rate also lands here because it fails the positivity test.
    #[error("poisson loss: rate {value} at index {index} is not positive")]
    NonPositiveRate { index: usize, value: f64 },
    #[error("{context}: length mismatch, {lhs} vs {rhs}")]
    LengthMismatch {
        context: &'static str,
        lhs: usize,
        rhs: usize,
    },
    #[error("{context}: empty batch")]
    EmptyBatch { context: &'static str },
    /// Training aborts rather than continuing from a poisoned state. `group`
    /// names the parameter group holding non-finite values, or
    /// "activations" when the parameters are clean but the loss is not.
    #[error("non-finite values at epoch {epoch}, batch {batch} in {group}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        group: String,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
