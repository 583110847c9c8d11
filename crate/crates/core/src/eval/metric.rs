use super::{ConfusionMatrix, EvalError};

/// A streaming segmentation metric over argmax labels.
pub trait Metric: Send {
    fn name(&self) -> &str;
    fn reset(&mut self);
    fn update(&mut self, targets: &[u8], predictions: &[u8]) -> Result<(), EvalError>;
    fn compute(&self) -> Result<f64, EvalError>;
    fn confusion(&self) -> &ConfusionMatrix;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    MeanIou,
    MacroF1,
    PixelAccuracy,
}

/// Confusion-matrix-backed metric.
#[derive(Debug, Clone)]
pub struct ConfusionMetric {
    kind: MetricKind,
    cm: ConfusionMatrix,
}

impl ConfusionMetric {
    pub fn new(kind: MetricKind, num_classes: usize) -> Self {
        ConfusionMetric { kind, cm: ConfusionMatrix::new(num_classes) }
    }
}

impl Metric for ConfusionMetric {
    fn name(&self) -> &str {
        match self.kind {
            MetricKind::MeanIou => "miou",
            MetricKind::MacroF1 => "f1_macro",
            MetricKind::PixelAccuracy => "pixel_accuracy",
        }
    }

    fn reset(&mut self) {
        self.cm = ConfusionMatrix::new(self.cm.num_classes());
    }

    fn update(&mut self, targets: &[u8], predictions: &[u8]) -> Result<(), EvalError> {
        self.cm.add_slices(targets, predictions)
    }

    fn compute(&self) -> Result<f64, EvalError> {
        match self.kind {
            MetricKind::MeanIou => self.cm.miou(),
            MetricKind::MacroF1 => self.cm.macro_f1(),
            MetricKind::PixelAccuracy => self.cm.pixel_accuracy(),
        }
    }

    fn confusion(&self) -> &ConfusionMatrix {
        &self.cm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streaming_equals_batch() {
        let mut m = ConfusionMetric::new(MetricKind::MeanIou, 2);
        m.update(&[0, 1], &[0, 1]).unwrap();
        m.update(&[1, 1], &[0, 1]).unwrap();
        assert_eq!(m.compute().unwrap(), 7.0 / 12.0);
        m.reset();
        assert!(m.compute().is_err());
        assert!(m.update(&[0], &[0, 1]).is_err());
    }
}
