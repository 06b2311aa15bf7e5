//! Synthetic segmentation task, toy models and evaluation metrics.

pub mod dataset;
pub mod metrics;
pub mod model;

use thiserror::Error;

use crate::params::{ParamError, ParamVector};

pub use dataset::{gen_dataset, partition, PartitionMode, Sample, SegDataset};
pub use metrics::{seg_metrics, Confusion, SegMetrics};
pub use model::{forward_loss_grad, predict, Architecture, Model, ModelKind};

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {0} out of range")]
    LabelOutOfRange(u8),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Held-out evaluation of a parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub metrics: SegMetrics,
}

/// Mean loss and pooled-confusion metrics over `indices` of `ds`.
pub fn evaluate(
    arch: &Architecture,
    params: &ParamVector,
    ds: &SegDataset,
    indices: &[usize],
) -> Result<Evaluation, LearnError> {
    if indices.is_empty() {
        return Err(LearnError::InvalidArgument("empty evaluation set".into()));
    }
    let mut confusion = Confusion::default();
    let mut loss = 0.0;
    for &i in indices {
        let s = ds.sample(i);
        loss += arch.loss(params, &[s])?;
        let pred = arch.predict(params, s.image)?;
        confusion.add(&pred, s.mask)?;
    }
    Ok(Evaluation {
        loss: loss / indices.len() as f64,
        metrics: confusion.metrics()?,
    })
}
