//! Training, validation and testing of a segmentation task.

mod manifest;
mod trainer;

pub use manifest::{CheckpointSet, EpochRecord, RunManifest, TestRecord, MANIFEST_FILE};
pub use trainer::{fit, test, TestOutputs, Trainer, CHECKPOINT_DIR, TEST_OUTPUT_DIR};

pub use crate::seed::{seed_everything, SeedState};

use crate::callbacks::CallbackError;
use crate::data::DataError;
use crate::eval::{EvalError, Metric};
use crate::logging::LogError;
use crate::model::CheckpointError;
use crate::model::{ComposedModel, ModelError};
use crate::nn::{Loss, Optimizer, PixelLogits, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("device: {0}")]
    Device(String),
    #[error("non-finite loss {value} in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no {0} checkpoint to test with")]
    MissingCheckpoint(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Callback(#[from] CallbackError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// The four parts a segmentation task is assembled from.
pub struct TaskSpec {
    pub loss: Box<dyn Loss<f32>>,
    pub optimizer: Box<dyn Optimizer<f32>>,
    pub metric: Box<dyn Metric>,
    pub model: ComposedModel<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Device {
    Cpu,
    Accelerator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TrainPlan {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub device: Device,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TaskError> {
        if self.max_epochs == 0 {
            return Err(TaskError::InvalidPlan("max_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TaskError::InvalidPlan("batch_size must be at least 1".into()));
        }
        if self.device != Device::Cpu {
            return Err(TaskError::Device("no accelerator backend is available; use device `cpu`".into()));
        }
        Ok(())
    }
}

/// Flatten `(N, C, H, W)` logits to `(N*H*W, C)` rows with aligned targets.
pub fn format_for_loss<'a>(logits: &Tensor<f32>, labels: &'a [u8]) -> Result<(PixelLogits<f32>, &'a [u8]), TaskError> {
    let [n, _, h, w] = logits.shape();
    if labels.len() != n * h * w {
        return Err(TaskError::Shape(format!("{} labels for logits {:?}", labels.len(), logits.shape())));
    }
    Ok((PixelLogits::from_nchw(logits), labels))
}

/// Argmax predictions and aligned targets.
pub fn format_for_metric<'a>(logits: &Tensor<f32>, labels: &'a [u8]) -> Result<(Vec<u8>, &'a [u8]), TaskError> {
    let (flat, targets) = format_for_loss(logits, labels)?;
    Ok((flat.argmax(), targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{ConfusionMetric, MetricKind};
    use crate::nn::CrossEntropy;

    #[test]
    fn flattening_shapes() {
        let t = Tensor::<f32>::zeros([2, 8, 256, 256]);
        let labels = vec![0u8; 2 * 256 * 256];
        let (flat, targets) = format_for_loss(&t, &labels).unwrap();
        assert_eq!((flat.pixels, flat.classes, targets.len()), (131072, 8, 131072));
        let one = Tensor::<f32>::zeros([1, 8, 1, 1]);
        let (flat, targets) = format_for_loss(&one, &[3]).unwrap();
        assert_eq!((flat.pixels, flat.classes, targets.len()), (1, 8, 1));
        assert!(format_for_loss(&one, &[1, 2]).is_err());
    }

    #[test]
    fn one_hot_logits_give_near_zero_loss_and_perfect_metric() {
        let (n, c, h, w) = (1, 4, 2, 3);
        let labels: Vec<u8> = vec![0, 1, 2, 3, 1, 0];
        let big = 30.0f32;
        let mut data = vec![0f32; n * c * h * w];
        for (p, &l) in labels.iter().enumerate() {
            data[l as usize * h * w + p] = big;
        }
        let t = Tensor::from_vec([n, c, h, w], data);
        let (flat, targets) = format_for_loss(&t, &labels).unwrap();
        let (loss, _) = Loss::<f32>::compute(&CrossEntropy, &flat, targets);
        // analytic: ln(1 + (C-1) e^{-big})
        let expected = (1.0 + 3.0 * (-30.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
        let (pred, targets) = format_for_metric(&t, &labels).unwrap();
        let mut m = ConfusionMetric::new(MetricKind::MeanIou, 4);
        m.update(targets, &pred).unwrap();
        assert_eq!(m.compute().unwrap(), 1.0);
    }

    #[test]
    fn plan_validation() {
        let ok = TrainPlan { max_epochs: 1, batch_size: 1, seed: 0, device: Device::Cpu };
        assert!(ok.validate().is_ok());
        assert!(TrainPlan { max_epochs: 0, ..ok }.validate().is_err());
        assert!(TrainPlan { batch_size: 0, ..ok }.validate().is_err());
        assert!(matches!(TrainPlan { device: Device::Accelerator, ..ok }.validate(), Err(TaskError::Device(_))));
    }
}
