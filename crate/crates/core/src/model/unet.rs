use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Backbone, BackboneSpec, ComposedModel, FeatureInterface, Header, HeaderSpec, ModelError};
use crate::nn::{join, Conv2d, DoubleConv, Element, Layer, MaxPool2, Mode, Param, Tensor, UpConv2x2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct UNetConfig {
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub in_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { num_classes: 8, base_channels: 64, depth: 5, in_channels: 3 }
    }
}

impl UNetConfig {
    fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidHyperparameter(m));
        if self.depth == 0 || self.depth > 12 {
            return bad(format!("depth must be in 1..=12, got {}", self.depth));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be >= 1".into());
        }
        if self.base_channels.checked_shl(self.depth as u32 - 1).map_or(true, |c| c > 1 << 16) {
            return bad("base_channels * 2^(depth-1) exceeds 65536".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return bad(format!("num_classes must be in 2..=256, got {}", self.num_classes));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Trainable scalar count of the padded, batch-normalized U-Net, derived from
/// layer shapes without building the network.
pub fn unet_parameter_count(cfg: &UNetConfig) -> usize {
    let conv3 = |i: usize, o: usize| 9 * i * o;
    let bn = |c: usize| 2 * c;
    let double = |i: usize, o: usize| conv3(i, o) + bn(o) + conv3(o, o) + bn(o);
    let mut total = double(cfg.in_channels, cfg.channels(0));
    for l in 1..cfg.depth {
        total += double(cfg.channels(l - 1), cfg.channels(l));
    }
    for l in 0..cfg.depth.saturating_sub(1) {
        let (hi, lo) = (cfg.channels(l + 1), cfg.channels(l));
        total += 4 * hi * lo + lo + double(2 * lo, lo);
    }
    total + cfg.channels(0) * cfg.num_classes + cfg.num_classes
}

/// Encoder/decoder trunk with skip connections; emits full-resolution
/// features with `base_channels` channels.
pub struct UNetTrunk<F> {
    cfg: UNetConfig,
    enc: Vec<DoubleConv<F>>,
    pools: Vec<MaxPool2>,
    ups: Vec<UpConv2x2<F>>,
    dec: Vec<DoubleConv<F>>,
}

impl<F: Element> UNetTrunk<F> {
    pub fn new<R: rand::Rng + ?Sized>(cfg: &UNetConfig, rng: &mut R) -> Self {
        let mut enc = vec![DoubleConv::new(cfg.in_channels, cfg.channels(0), rng)];
        let mut pools = Vec::new();
        for l in 1..cfg.depth {
            pools.push(MaxPool2::new());
            enc.push(DoubleConv::new(cfg.channels(l - 1), cfg.channels(l), rng));
        }
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for l in 0..cfg.depth - 1 {
            ups.push(UpConv2x2::new(cfg.channels(l + 1), cfg.channels(l), rng));
            dec.push(DoubleConv::new(2 * cfg.channels(l), cfg.channels(l), rng));
        }
        UNetTrunk { cfg: *cfg, enc, pools, ups, dec }
    }
}

impl<F: Element> Layer<F> for UNetTrunk<F> {
    fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Tensor<F> {
        let depth = self.cfg.depth;
        let mut skips = vec![self.enc[0].forward(x, mode)];
        for l in 1..depth {
            let pooled = self.pools[l - 1].forward(&skips[l - 1], mode);
            skips.push(self.enc[l].forward(&pooled, mode));
        }
        let mut y = skips.pop().expect("at least one level");
        for l in (0..depth - 1).rev() {
            let up = self.ups[l].forward(&y, mode);
            y = self.dec[l].forward(&Tensor::cat_channels(&skips[l], &up), mode);
        }
        y
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let depth = self.cfg.depth;
        let mut d = dy.clone();
        let mut dskips = Vec::with_capacity(depth - 1);
        for l in 0..depth - 1 {
            let dcat = self.dec[l].backward(&d);
            let (dskip, dup) = dcat.split_channels(self.cfg.channels(l));
            dskips.push(dskip);
            d = self.ups[l].backward(&dup);
        }
        for l in (1..depth).rev() {
            let denc = self.enc[l].backward(&d);
            d = self.pools[l - 1].backward(&denc);
            d.add_assign(&dskips[l - 1]);
        }
        self.enc[0].backward(&d)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        for (l, b) in self.enc.iter().enumerate() {
            b.visit(&join(prefix, &format!("enc{l}")), f);
        }
        for (l, (u, b)) in self.ups.iter().zip(&self.dec).enumerate() {
            u.visit(&join(prefix, &format!("up{l}")), f);
            b.visit(&join(prefix, &format!("dec{l}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        for (l, b) in self.enc.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("enc{l}")), f);
        }
        for (l, (u, b)) in self.ups.iter_mut().zip(&mut self.dec).enumerate() {
            u.visit_mut(&join(prefix, &format!("up{l}")), f);
            b.visit_mut(&join(prefix, &format!("dec{l}")), f);
        }
    }
}

impl<F: Element> Backbone<F> for UNetTrunk<F> {
    fn spec(&self) -> BackboneSpec {
        let c = &self.cfg;
        BackboneSpec {
            arch_id: format!("unet-trunk/in{}-base{}-depth{}", c.in_channels, c.base_channels, c.depth),
            in_channels: c.in_channels,
            outputs: vec![FeatureInterface { channels: c.base_channels, scale: 1 }],
        }
    }

    fn size_divisor(&self) -> usize {
        1 << (self.cfg.depth - 1)
    }
}

/// Per-pixel linear classifier (1x1 convolution with bias).
pub struct Conv1x1Head<F> {
    conv: Conv2d<F>,
    num_classes: usize,
}

impl<F: Element> Conv1x1Head<F> {
    pub fn new<R: rand::Rng + ?Sized>(in_c: usize, num_classes: usize, rng: &mut R) -> Self {
        Conv1x1Head { conv: Conv2d::new(in_c, num_classes, 1, true, rng), num_classes }
    }
}

impl<F: Element> Layer<F> for Conv1x1Head<F> {
    fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Tensor<F> {
        self.conv.forward(x, mode)
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        self.conv.backward(dy)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.conv.visit(&join(prefix, "conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}

impl<F: Element> Header<F> for Conv1x1Head<F> {
    fn spec(&self) -> HeaderSpec {
        let in_c = self.conv.in_channels();
        HeaderSpec {
            arch_id: format!("conv1x1-head/in{}-classes{}", in_c, self.num_classes),
            inputs: vec![FeatureInterface { channels: in_c, scale: 1 }],
            num_classes: self.num_classes,
        }
    }
}

/// Build a randomly initialized U-Net; weights are a pure function of `seed`.
pub fn build_unet<F: Element>(cfg: &UNetConfig, seed: u64) -> Result<ComposedModel<F>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trunk = UNetTrunk::new(cfg, &mut rng);
    let head = Conv1x1Head::new(cfg.base_channels, cfg.num_classes, &mut rng);
    ComposedModel::new(Box::new(trunk), Box::new(head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_nchw;

    fn small(depth: usize) -> UNetConfig {
        UNetConfig { num_classes: 5, base_channels: 4, depth, in_channels: 3 }
    }

    #[test]
    fn rejects_invalid_hyperparameters() {
        for cfg in [
            UNetConfig { depth: 0, ..small(1) },
            UNetConfig { base_channels: 0, ..small(2) },
            UNetConfig { num_classes: 1, ..small(2) },
        ] {
            assert!(matches!(build_unet::<f32>(&cfg, 1), Err(ModelError::InvalidHyperparameter(_))));
        }
    }

    #[test]
    fn default_parameter_count_is_golden() {
        let n = unet_parameter_count(&UNetConfig::default());
        assert_eq!(n, 31_038_088);
        assert!((28_000_000..=34_000_000).contains(&n));
    }

    #[test]
    fn built_count_matches_analytic_count() {
        for depth in 1..=4 {
            let cfg = small(depth);
            let model = build_unet::<f32>(&cfg, 3).unwrap();
            assert_eq!(model.parameter_count(), unet_parameter_count(&cfg), "depth {depth}");
        }
    }

    #[test]
    fn output_keeps_spatial_size_and_softmax_normalizes() {
        for depth in 1..=3 {
            let mut model = build_unet::<f64>(&small(depth), 9).unwrap();
            let d = model.size_divisor();
            let x = Tensor::from_vec([2, 3, 2 * d, 3 * d], (0..2 * 3 * 6 * d * d).map(|i| ((i % 17) as f64 - 8.0) / 8.0).collect());
            let y = model.forward(&x, Mode::Train).unwrap();
            assert_eq!(y.shape(), [2, 5, 2 * d, 3 * d]);
            let p = softmax_nchw(&y);
            let plane = 6 * d * d;
            for n in 0..2 {
                for px in 0..plane {
                    let s: f64 = (0..5).map(|c| p.sample(n)[c * plane + px]).sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_unet::<f32>(&small(3), 2149823).unwrap().state();
        let b = build_unet::<f32>(&small(3), 2149823).unwrap().state();
        let c = build_unet::<f32>(&small(3), 2149824).unwrap().state();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn backbone_declared_interface_matches_probe() {
        let mut model = build_unet::<f32>(&small(3), 0).unwrap();
        let spec = model.backbone_spec();
        let feats = model.forward_features(&Tensor::zeros([1, 3, 8, 12]), Mode::Eval).unwrap();
        assert_eq!(feats.channels(), spec.outputs[0].channels);
        assert_eq!(8 / feats.height(), spec.outputs[0].scale);
        assert_eq!(12 / feats.width(), spec.outputs[0].scale);
    }
}
