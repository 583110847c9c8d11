use super::{Element, Tensor};

/// Logits laid out as one row per pixel, one column per class.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLogits<F> {
    pub pixels: usize,
    pub classes: usize,
    pub data: Vec<F>,
}

impl<F: Element> PixelLogits<F> {
    /// Flatten NCHW logits into `(N*H*W, C)` rows ordered by (n, y, x).
    pub fn from_nchw(t: &Tensor<F>) -> Self {
        let [n, c, h, w] = t.shape();
        let plane = h * w;
        let mut data = vec![F::zero(); n * plane * c];
        for i in 0..n {
            let s = t.sample(i);
            for ch in 0..c {
                for p in 0..plane {
                    data[(i * plane + p) * c + ch] = s[ch * plane + p];
                }
            }
        }
        PixelLogits { pixels: n * plane, classes: c, data }
    }

    /// Inverse of [`PixelLogits::from_nchw`].
    pub fn to_nchw(&self, shape: [usize; 4]) -> Tensor<F> {
        let [n, c, h, w] = shape;
        assert_eq!(c, self.classes);
        assert_eq!(n * h * w, self.pixels);
        let plane = h * w;
        let mut out = Tensor::zeros(shape);
        for i in 0..n {
            let s = out.sample_mut(i);
            for ch in 0..c {
                for p in 0..plane {
                    s[ch * plane + p] = self.data[(i * plane + p) * c + ch];
                }
            }
        }
        out
    }

    pub fn row(&self, p: usize) -> &[F] {
        &self.data[p * self.classes..(p + 1) * self.classes]
    }

    /// Per-pixel argmax, ties resolved to the lowest class index.
    pub fn argmax(&self) -> Vec<u8> {
        (0..self.pixels).map(|p| argmax(self.row(p)) as u8).collect()
    }
}

pub fn argmax<F: PartialOrd + Copy>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row<F: Element>(row: &[F], out: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Channel-wise softmax of NCHW logits.
pub fn softmax_nchw<F: Element>(t: &Tensor<F>) -> Tensor<F> {
    let shape = t.shape();
    let mut flat = PixelLogits::from_nchw(t);
    let mut buf = vec![F::zero(); flat.classes];
    for p in 0..flat.pixels {
        softmax_row(flat.row(p), &mut buf);
        flat.data[p * flat.classes..(p + 1) * flat.classes].copy_from_slice(&buf);
    }
    flat.to_nchw(shape)
}

/// A pixel-wise classification loss.
pub trait Loss<F: Element>: Send {
    fn name(&self) -> &str;
    /// Mean loss over pixels and its gradient w.r.t. the logits.
    fn compute(&self, logits: &PixelLogits<F>, targets: &[u8]) -> (f64, PixelLogits<F>);
}

/// Unweighted mean cross-entropy.
#[derive(Debug, Clone, Default)]
pub struct CrossEntropy;

impl<F: Element> Loss<F> for CrossEntropy {
    fn name(&self) -> &str {
        "cross_entropy"
    }

    fn compute(&self, logits: &PixelLogits<F>, targets: &[u8]) -> (f64, PixelLogits<F>) {
        assert_eq!(logits.pixels, targets.len(), "logit rows vs targets");
        let c = logits.classes;
        let inv_n = F::from_f64_lossy(1.0 / logits.pixels as f64);
        let mut grad = PixelLogits { pixels: logits.pixels, classes: c, data: vec![F::zero(); logits.data.len()] };
        let mut total = 0.0f64;
        for (p, &t) in targets.iter().enumerate() {
            let t = t as usize;
            assert!(t < c, "target class {t} out of range");
            let row = logits.row(p);
            let g = &mut grad.data[p * c..(p + 1) * c];
            softmax_row(row, g);
            // log-sum-exp in f64 for the reported value
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[t].as_f64();
            g[t] -= F::one();
            g.iter_mut().for_each(|v| *v *= inv_n);
        }
        (total / logits.pixels as f64, grad)
    }
}
