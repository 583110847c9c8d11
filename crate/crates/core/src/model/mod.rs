//! Segmentation networks as an explicit backbone (encoder trunk) plus header
//! (classifier) pair.

mod checkpoint;
mod unet;

use std::fmt;

use crate::nn::{Element, Layer, Mode, Param, ParamKind, Tensor};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_part, save_part, CheckpointEntry, CheckpointError,
    WeightCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use unet::{build_unet, unet_parameter_count, Conv1x1Head, UNetConfig, UNetTrunk};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid model hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("input shape {got:?} not accepted: {reason}")]
    BadInput { got: [usize; 4], reason: String },
    #[error("backbone and header are incompatible: {0}")]
    Incompatible(String),
}

/// One feature map emitted by a backbone: channel count and downsampling
/// factor relative to the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureInterface {
    pub channels: usize,
    pub scale: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneSpec {
    pub arch_id: String,
    pub in_channels: usize,
    pub outputs: Vec<FeatureInterface>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HeaderSpec {
    pub arch_id: String,
    pub inputs: Vec<FeatureInterface>,
    pub num_classes: usize,
}

/// Encoder part of a network.
pub trait Backbone<F: Element>: Layer<F> {
    fn spec(&self) -> BackboneSpec;
    /// Input height and width must be multiples of this.
    fn size_divisor(&self) -> usize;
}

/// Classifier part of a network.
pub trait Header<F: Element>: Layer<F> {
    fn spec(&self) -> HeaderSpec;
}

/// Which part of a composed model a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Backbone,
    Header,
    Full,
}

impl Part {
    pub fn code(self) -> u8 {
        match self {
            Part::Backbone => 0,
            Part::Header => 1,
            Part::Full => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Part> {
        match c {
            0 => Some(Part::Backbone),
            1 => Some(Part::Header),
            2 => Some(Part::Full),
            _ => None,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Part::Backbone => "backbone.ckpt",
            Part::Header => "header.ckpt",
            Part::Full => "full.ckpt",
        }
    }

    fn covers(self, name: &str) -> bool {
        match self {
            Part::Backbone => name.starts_with("backbone."),
            Part::Header => name.starts_with("header."),
            Part::Full => true,
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Part::Backbone => "backbone",
            Part::Header => "header",
            Part::Full => "full",
        };
        f.write_str(s)
    }
}

/// Outcome of [`check_compatibility`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Compatibility {
    Ok,
    Mismatch(Vec<String>),
}

impl Compatibility {
    pub fn is_ok(&self) -> bool {
        matches!(self, Compatibility::Ok)
    }
}

/// Compare what the backbone emits with what the header expects.
pub fn check_compatibility(backbone: &BackboneSpec, header: &HeaderSpec) -> Compatibility {
    let mut problems = Vec::new();
    if backbone.outputs.len() != header.inputs.len() {
        problems.push(format!("feature maps {} ≠ {}", backbone.outputs.len(), header.inputs.len()));
    }
    for (i, (emitted, expected)) in backbone.outputs.iter().zip(&header.inputs).enumerate() {
        let at = if backbone.outputs.len() > 1 { format!(" (map {i})") } else { String::new() };
        if emitted.channels != expected.channels {
            problems.push(format!("channels {} ≠ {}{at}", emitted.channels, expected.channels));
        }
        if emitted.scale != expected.scale {
            problems.push(format!("scale {} ≠ {}{at}", emitted.scale, expected.scale));
        }
    }
    if header.num_classes < 2 {
        problems.push(format!("num_classes {} < 2", header.num_classes));
    }
    if problems.is_empty() {
        Compatibility::Ok
    } else {
        Compatibility::Mismatch(problems)
    }
}

/// A backbone and a header run back to back.
pub struct ComposedModel<F: Element> {
    backbone: Box<dyn Backbone<F>>,
    header: Box<dyn Header<F>>,
}

impl<F: Element> ComposedModel<F> {
    pub fn new(backbone: Box<dyn Backbone<F>>, header: Box<dyn Header<F>>) -> Result<Self, ModelError> {
        if let Compatibility::Mismatch(p) = check_compatibility(&backbone.spec(), &header.spec()) {
            return Err(ModelError::Incompatible(p.join(", ")));
        }
        Ok(ComposedModel { backbone, header })
    }

    pub fn backbone_spec(&self) -> BackboneSpec {
        self.backbone.spec()
    }

    pub fn header_spec(&self) -> HeaderSpec {
        self.header.spec()
    }

    pub fn num_classes(&self) -> usize {
        self.header.spec().num_classes
    }

    pub fn in_channels(&self) -> usize {
        self.backbone.spec().in_channels
    }

    pub fn size_divisor(&self) -> usize {
        self.backbone.size_divisor()
    }

    pub fn arch_id(&self, part: Part) -> String {
        match part {
            Part::Backbone => self.backbone.spec().arch_id,
            Part::Header => self.header.spec().arch_id,
            Part::Full => format!("{}+{}", self.backbone.spec().arch_id, self.header.spec().arch_id),
        }
    }

    pub fn check_input(&self, shape: [usize; 4]) -> Result<(), ModelError> {
        let [n, c, h, w] = shape;
        let d = self.size_divisor();
        let reason = if n == 0 {
            Some("empty batch".to_string())
        } else if c != self.in_channels() {
            Some(format!("expected {} channels", self.in_channels()))
        } else if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            Some(format!("height and width must be positive multiples of {d}"))
        } else {
            None
        };
        match reason {
            Some(reason) => Err(ModelError::BadInput { got: shape, reason }),
            None => Ok(()),
        }
    }

    /// Backbone features only.
    pub fn forward_features(&mut self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>, ModelError> {
        self.check_input(x.shape())?;
        Ok(self.backbone.forward(x, mode))
    }

    /// Per-pixel class logits `(N, num_classes, H, W)`.
    pub fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Result<Tensor<F>, ModelError> {
        let feats = self.forward_features(x, mode)?;
        Ok(self.header.forward(&feats, mode))
    }

    /// Accumulate parameter gradients for the last training-mode forward.
    pub fn backward(&mut self, dlogits: &Tensor<F>) -> Tensor<F> {
        let d = self.header.backward(dlogits);
        self.backbone.backward(&d)
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, p| p.zero_grad());
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.backbone.visit("backbone", f);
        self.header.visit("header", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.backbone.visit_mut("backbone", f);
        self.header.visit_mut("header", f);
    }

    pub fn visit_part(&self, part: Part, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.visit(&mut |name, p| {
            if part.covers(name) {
                f(name, p)
            }
        });
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, p| {
            if p.kind == ParamKind::Weight {
                total += p.len()
            }
        });
        total
    }

    /// Snapshot of all parameter values by name.
    pub fn state(&self) -> Vec<(String, Vec<F>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, p| out.push((n.to_string(), p.value.clone())));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_pair(emit: usize, expect: usize) -> (BackboneSpec, HeaderSpec) {
        (
            BackboneSpec { arch_id: "b".into(), in_channels: 3, outputs: vec![FeatureInterface { channels: emit, scale: 1 }] },
            HeaderSpec { arch_id: "h".into(), inputs: vec![FeatureInterface { channels: expect, scale: 1 }], num_classes: 8 },
        )
    }

    #[test]
    fn matching_interfaces_are_compatible() {
        let (b, h) = spec_pair(64, 64);
        assert_eq!(check_compatibility(&b, &h), Compatibility::Ok);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let (b, h) = spec_pair(64, 128);
        match check_compatibility(&b, &h) {
            Compatibility::Mismatch(p) => assert_eq!(p, vec!["channels 64 ≠ 128".to_string()]),
            Compatibility::Ok => panic!("expected mismatch"),
        }
    }

    #[test]
    fn scale_and_count_mismatches_are_listed() {
        let (mut b, h) = spec_pair(64, 64);
        b.outputs[0].scale = 2;
        b.outputs.push(FeatureInterface { channels: 32, scale: 4 });
        let Compatibility::Mismatch(p) = check_compatibility(&b, &h) else { panic!() };
        assert!(p.iter().any(|s| s == "feature maps 2 ≠ 1"));
        assert!(p.iter().any(|s| s.starts_with("scale 2 ≠ 1")));
    }

    #[test]
    fn header_class_count_from_interpolated_value_matches() {
        let mut model = build_unet::<f32>(&UNetConfig { num_classes: 8, base_channels: 4, depth: 2, in_channels: 3 }, 0).unwrap();
        assert_eq!(model.num_classes(), 8);
        assert!(check_compatibility(&model.backbone_spec(), &model.header_spec()).is_ok());
        let err = model.forward(&Tensor::zeros([1, 3, 5, 8]), Mode::Eval).unwrap_err();
        assert!(matches!(err, ModelError::BadInput { .. }));
    }
}
