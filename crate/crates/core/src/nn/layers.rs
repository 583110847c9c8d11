//! Layers with hand-written backward passes.
//!
//! Each layer caches what its backward pass needs during a training-mode
//! forward call. `backward` must be called at most once per training forward,
//! in reverse order of the forward calls.

use rand::Rng;

use super::{matmul, Element, Mat, Param, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Common surface of every differentiable building block.
pub trait Layer<F: Element>: Send {
    fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Tensor<F>;
    fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F>;
    /// Visit parameters with fully qualified names `"{prefix}.{local}"`.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform<F: Element, R: Rng + ?Sized>(rng: &mut R, len: usize, bound: f64) -> Vec<F> {
    (0..len).map(|_| F::from_f64_lossy(rng.gen_range(-bound..bound))).collect()
}

/// Square-kernel, stride-1 convolution with "same" zero padding.
pub struct Conv2d<F> {
    in_c: usize,
    out_c: usize,
    k: usize,
    pad: usize,
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    input: Option<Tensor<F>>,
}

impl<F: Element> Conv2d<F> {
    /// He-style uniform fan-in initialization, zero bias.
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, k: usize, bias: bool, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let fan_in = in_c * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Param::weight(vec![out_c, in_c, k, k], uniform(rng, out_c * fan_in, bound));
        let bias = bias.then(|| Param::weight(vec![out_c], vec![F::zero(); out_c]));
        Conv2d { in_c, out_c, k, pad: k / 2, weight, bias, input: None }
    }

    pub fn in_channels(&self) -> usize {
        self.in_c
    }

    pub fn out_channels(&self) -> usize {
        self.out_c
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn im2col(&self, x: &[F], h: usize, w: usize, col: &mut [F]) {
        let (k, pad) = (self.k, self.pad as isize);
        let plane = h * w;
        for c in 0..self.in_c {
            let src = &x[c * plane..(c + 1) * plane];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    let dx = kj as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + ki as isize - pad;
                        let out_row = &mut dst[y * w..(y + 1) * w];
                        if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                            out_row.iter_mut().for_each(|v| *v = F::zero());
                            continue;
                        }
                        let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                        out_row[..x_lo].iter_mut().for_each(|v| *v = F::zero());
                        out_row[x_hi..].iter_mut().for_each(|v| *v = F::zero());
                        let s0 = (x_lo as isize + dx) as usize;
                        out_row[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[F], h: usize, w: usize, dx_out: &mut [F]) {
        let (k, pad) = (self.k, self.pad as isize);
        let plane = h * w;
        for c in 0..self.in_c {
            let dst = &mut dx_out[c * plane..(c + 1) * plane];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * plane..(row + 1) * plane];
                    let dx = kj as isize - pad;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x_lo >= x_hi {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + ki as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s0 = (x_lo as isize + dx) as usize;
                        let d = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                        for (o, v) in d.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
}

impl<F: Element> Layer<F> for Conv2d<F> {
    fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Tensor<F> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_c, "conv input channels");
        let plane = h * w;
        let rows = self.col_rows();
        let mut out = Tensor::zeros([n, self.out_c, h, w]);
        let mut col = if self.k == 1 { Vec::new() } else { vec![F::zero(); rows * plane] };
        for i in 0..n {
            let cols: &[F] = if self.k == 1 {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), h, w, &mut col);
                &col
            };
            let o = out.sample_mut(i);
            matmul(Mat::new(&self.weight.value, self.out_c, rows), Mat::new(cols, rows, plane), o, false);
            if let Some(b) = &self.bias {
                for (oc, chunk) in o.chunks_mut(plane).enumerate() {
                    let bv = b.value[oc];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        self.input = (mode == Mode::Train).then(|| x.clone());
        out
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let x = self.input.take().expect("conv backward without training forward");
        let [n, _, h, w] = x.shape();
        let plane = h * w;
        let rows = self.col_rows();
        let mut dx = Tensor::zeros(x.shape());
        let mut col = if self.k == 1 { Vec::new() } else { vec![F::zero(); rows * plane] };
        let mut dcol = vec![F::zero(); rows * plane];
        for i in 0..n {
            let dyi = dy.sample(i);
            let cols: &[F] = if self.k == 1 {
                x.sample(i)
            } else {
                self.im2col(x.sample(i), h, w, &mut col);
                &col
            };
            matmul(Mat::new(dyi, self.out_c, plane), Mat::new(cols, rows, plane).t(), &mut self.weight.grad, true);
            if let Some(b) = &mut self.bias {
                for (oc, chunk) in dyi.chunks(plane).enumerate() {
                    let s: f64 = chunk.iter().map(|v| v.as_f64()).sum();
                    b.grad[oc] += F::from_f64_lossy(s);
                }
            }
            if self.k == 1 {
                matmul(Mat::new(&self.weight.value, self.out_c, rows).t(), Mat::new(dyi, self.out_c, plane), dx.sample_mut(i), false);
            } else {
                matmul(Mat::new(&self.weight.value, self.out_c, rows).t(), Mat::new(dyi, self.out_c, plane), &mut dcol, false);
                self.col2im(&dcol, h, w, dx.sample_mut(i));
            }
        }
        dx
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Per-channel batch normalization with running statistics.
pub struct BatchNorm2d<F> {
    c: usize,
    eps: f64,
    momentum: f64,
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    cache: Option<(Tensor<F>, Vec<f64>)>,
}

impl<F: Element> BatchNorm2d<F> {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            c,
            eps: 1e-5,
            momentum: 0.1,
            gamma: Param::weight(vec![c], vec![F::one(); c]),
            beta: Param::weight(vec![c], vec![F::zero(); c]),
            running_mean: Param::buffer(vec![c], vec![F::zero(); c]),
            running_var: Param::buffer(vec![c], vec![F::one(); c]),
            cache: None,
        }
    }
}

impl<F: Element> Layer<F> for BatchNorm2d<F> {
    fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Tensor<F> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.c, "batch norm channels");
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut stats = Vec::with_capacity(c);
        for ch in 0..c {
            if mode == Mode::Train {
                let mut sum = 0.0;
                for i in 0..n {
                    sum += x.sample(i)[ch * plane..(ch + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0;
                for i in 0..n {
                    sq += x.sample(i)[ch * plane..(ch + 1) * plane]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mean;
                            d * d
                        })
                        .sum::<f64>();
                }
                let var = sq / count;
                let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                let m = self.momentum;
                let rm = self.running_mean.value[ch].as_f64();
                let rv = self.running_var.value[ch].as_f64();
                self.running_mean.value[ch] = F::from_f64_lossy((1.0 - m) * rm + m * mean);
                self.running_var.value[ch] = F::from_f64_lossy((1.0 - m) * rv + m * unbiased);
                stats.push((mean, 1.0 / (var + self.eps).sqrt()));
            } else {
                let mean = self.running_mean.value[ch].as_f64();
                let var = self.running_var.value[ch].as_f64();
                stats.push((mean, 1.0 / (var + self.eps).sqrt()));
            }
        }
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for i in 0..n {
            let xs = x.sample(i);
            let xh = xhat.sample_mut(i);
            for (ch, &(mean, inv)) in stats.iter().enumerate() {
                let mean = F::from_f64_lossy(mean);
                let inv = F::from_f64_lossy(inv);
                for (d, s) in xh[ch * plane..(ch + 1) * plane].iter_mut().zip(&xs[ch * plane..(ch + 1) * plane]) {
                    *d = (*s - mean) * inv;
                }
            }
            let o = out.sample_mut(i);
            for ch in 0..c {
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for (d, s) in o[ch * plane..(ch + 1) * plane].iter_mut().zip(&xh[ch * plane..(ch + 1) * plane]) {
                    *d = g * *s + b;
                }
            }
        }
        self.cache = (mode == Mode::Train).then(|| (xhat, stats.iter().map(|s| s.1).collect()));
        out
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let (xhat, inv_std) = self.cache.take().expect("batch norm backward without training forward");
        let [n, c, h, w] = xhat.shape();
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut dx = Tensor::zeros(xhat.shape());
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..n {
                let d = &dy.sample(i)[ch * plane..(ch + 1) * plane];
                let xh = &xhat.sample(i)[ch * plane..(ch + 1) * plane];
                for (a, b) in d.iter().zip(xh) {
                    sum_dy += a.as_f64();
                    sum_dy_xhat += a.as_f64() * b.as_f64();
                }
            }
            self.gamma.grad[ch] += F::from_f64_lossy(sum_dy_xhat);
            self.beta.grad[ch] += F::from_f64_lossy(sum_dy);
            let scale = self.gamma.value[ch].as_f64() * inv_std[ch] / count;
            let mean_dy = F::from_f64_lossy(sum_dy / count);
            let mean_dy_xhat = F::from_f64_lossy(sum_dy_xhat / count);
            let scale = F::from_f64_lossy(scale * count);
            for i in 0..n {
                let d = &dy.sample(i)[ch * plane..(ch + 1) * plane];
                let xh = &xhat.sample(i)[ch * plane..(ch + 1) * plane];
                let out = &mut dx.sample_mut(i)[ch * plane..(ch + 1) * plane];
                for ((o, a), b) in out.iter_mut().zip(d).zip(xh) {
                    *o = scale * (*a - mean_dy - *b * mean_dy_xhat);
                }
            }
        }
        dx
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// 3x3 convolution (no bias) -> batch norm -> ReLU.
pub struct ConvBnRelu<F> {
    pub conv: Conv2d<F>,
    pub bn: BatchNorm2d<F>,
    activated: Option<Tensor<F>>,
}

impl<F: Element> ConvBnRelu<F> {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        ConvBnRelu { conv: Conv2d::new(in_c, out_c, 3, false, rng), bn: BatchNorm2d::new(out_c), activated: None }
    }
}

impl<F: Element> Layer<F> for ConvBnRelu<F> {
    fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Tensor<F> {
        let y = self.conv.forward(x, mode);
        let mut y = self.bn.forward(&y, mode);
        y.data_mut().iter_mut().for_each(|v| {
            if *v < F::zero() {
                *v = F::zero()
            }
        });
        self.activated = (mode == Mode::Train).then(|| y.clone());
        y
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let act = self.activated.take().expect("relu backward without training forward");
        let mut d = dy.clone();
        for (g, a) in d.data_mut().iter_mut().zip(act.data()) {
            if *a <= F::zero() {
                *g = F::zero();
            }
        }
        let d = self.bn.backward(&d);
        self.conv.backward(&d)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Two stacked [`ConvBnRelu`] blocks.
pub struct DoubleConv<F> {
    pub first: ConvBnRelu<F>,
    pub second: ConvBnRelu<F>,
}

impl<F: Element> DoubleConv<F> {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        DoubleConv { first: ConvBnRelu::new(in_c, out_c, rng), second: ConvBnRelu::new(out_c, out_c, rng) }
    }
}

impl<F: Element> Layer<F> for DoubleConv<F> {
    fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Tensor<F> {
        let y = self.first.forward(x, mode);
        self.second.forward(&y, mode)
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let d = self.second.backward(dy);
        self.first.backward(&d)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        self.first.visit(&join(prefix, "0"), f);
        self.second.visit(&join(prefix, "1"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        self.first.visit_mut(&join(prefix, "0"), f);
        self.second.visit_mut(&join(prefix, "1"), f);
    }
}

/// 2x2 max pooling with stride 2; first maximum wins on ties.
#[derive(Default)]
pub struct MaxPool2 {
    cache: Option<([usize; 4], Vec<u8>)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        MaxPool2 { cache: None }
    }

    pub fn forward<F: Element>(&mut self, x: &Tensor<F>, mode: Mode) -> Tensor<F> {
        let [n, c, h, w] = x.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even spatial size, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut arg = vec![0u8; n * c * oh * ow];
        let src = x.data();
        let dst = out.data_mut();
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let idx = [base + 2 * i * w + 2 * j, base + 2 * i * w + 2 * j + 1, base + (2 * i + 1) * w + 2 * j, base + (2 * i + 1) * w + 2 * j + 1];
                    let mut best = 0;
                    for q in 1..4 {
                        if src[idx[q]] > src[idx[best]] {
                            best = q;
                        }
                    }
                    let o = p * oh * ow + i * ow + j;
                    dst[o] = src[idx[best]];
                    arg[o] = best as u8;
                }
            }
        }
        self.cache = (mode == Mode::Train).then_some((x.shape(), arg));
        out
    }

    pub fn backward<F: Element>(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let (shape, arg) = self.cache.take().expect("max pool backward without training forward");
        let [n, c, h, w] = shape;
        let (oh, ow) = (h / 2, w / 2);
        let mut dx = Tensor::zeros(shape);
        let d = dx.data_mut();
        for p in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    let o = p * oh * ow + i * ow + j;
                    let q = arg[o] as usize;
                    let (a, b) = (q / 2, q % 2);
                    d[p * h * w + (2 * i + a) * w + 2 * j + b] += dy.data()[o];
                }
            }
        }
        dx
    }
}

/// 2x2 transposed convolution with stride 2 (doubles spatial size).
/// Weight layout is `(in, out, 2, 2)`.
pub struct UpConv2x2<F> {
    in_c: usize,
    out_c: usize,
    pub weight: Param<F>,
    pub bias: Param<F>,
    input: Option<Tensor<F>>,
}

impl<F: Element> UpConv2x2<F> {
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_c as f64).sqrt();
        UpConv2x2 {
            in_c,
            out_c,
            weight: Param::weight(vec![in_c, out_c, 2, 2], uniform(rng, in_c * out_c * 4, bound)),
            bias: Param::weight(vec![out_c], vec![F::zero(); out_c]),
            input: None,
        }
    }
}

impl<F: Element> Layer<F> for UpConv2x2<F> {
    fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Tensor<F> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_c, "up-conv input channels");
        let plane = h * w;
        let rows = self.out_c * 4;
        let mut y4 = vec![F::zero(); rows * plane];
        let mut out = Tensor::zeros([n, self.out_c, 2 * h, 2 * w]);
        for i in 0..n {
            matmul(Mat::new(&self.weight.value, self.in_c, rows).t(), Mat::new(x.sample(i), c, plane), &mut y4, false);
            let o = out.sample_mut(i);
            for co in 0..self.out_c {
                let b = self.bias.value[co];
                for a in 0..2 {
                    for bb in 0..2 {
                        let src = &y4[(co * 4 + a * 2 + bb) * plane..(co * 4 + a * 2 + bb + 1) * plane];
                        for r in 0..h {
                            let dst_row = co * 4 * plane + (2 * r + a) * 2 * w;
                            for col in 0..w {
                                o[dst_row + 2 * col + bb] = src[r * w + col] + b;
                            }
                        }
                    }
                }
            }
        }
        self.input = (mode == Mode::Train).then(|| x.clone());
        out
    }

    fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let x = self.input.take().expect("up-conv backward without training forward");
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let rows = self.out_c * 4;
        let mut d4 = vec![F::zero(); rows * plane];
        let mut dx = Tensor::zeros(x.shape());
        for i in 0..n {
            let d = dy.sample(i);
            for co in 0..self.out_c {
                let mut bsum = 0.0;
                for a in 0..2 {
                    for bb in 0..2 {
                        let dst = &mut d4[(co * 4 + a * 2 + bb) * plane..(co * 4 + a * 2 + bb + 1) * plane];
                        for r in 0..h {
                            let src_row = co * 4 * plane + (2 * r + a) * 2 * w;
                            for col in 0..w {
                                let v = d[src_row + 2 * col + bb];
                                dst[r * w + col] = v;
                                bsum += v.as_f64();
                            }
                        }
                    }
                }
                self.bias.grad[co] += F::from_f64_lossy(bsum);
            }
            matmul(Mat::new(x.sample(i), c, plane), Mat::new(&d4, rows, plane).t(), &mut self.weight.grad, true);
            matmul(Mat::new(&self.weight.value, self.in_c, rows), Mat::new(&d4, rows, plane), dx.sample_mut(i), false);
        }
        dx
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
