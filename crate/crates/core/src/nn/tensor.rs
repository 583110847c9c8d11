use super::Element;

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: [usize; 4],
    data: Vec<F>,
}

impl<F: Element> Tensor<F> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![F::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data length mismatch");
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements in one (C, H, W) sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    pub fn sample(&self, n: usize) -> &[F] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [F] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Concatenate along the channel axis.
    pub fn cat_channels(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        let [n, ca, h, w] = a.shape;
        let [nb, cb, hb, wb] = b.shape;
        assert!(n == nb && h == hb && w == wb, "cat shape mismatch");
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            out.extend_from_slice(a.sample(i));
            out.extend_from_slice(b.sample(i));
        }
        Tensor::from_vec([n, ca + cb, h, w], out)
    }

    /// Inverse of [`Tensor::cat_channels`]: first `ca` channels, then the rest.
    pub fn split_channels(&self, ca: usize) -> (Tensor<F>, Tensor<F>) {
        let [n, c, h, w] = self.shape;
        assert!(ca <= c);
        let plane = h * w;
        let mut a = Vec::with_capacity(n * ca * plane);
        let mut b = Vec::with_capacity(n * (c - ca) * plane);
        for i in 0..n {
            let s = self.sample(i);
            a.extend_from_slice(&s[..ca * plane]);
            b.extend_from_slice(&s[ca * plane..]);
        }
        (Tensor::from_vec([n, ca, h, w], a), Tensor::from_vec([n, c - ca, h, w], b))
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape);
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += *y;
        }
    }
}

/// Whether a parameter is optimized or only carried along (running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub kind: ParamKind,
}

impl<F: Element> Param<F> {
    pub fn weight(shape: Vec<usize>, value: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![F::zero(); value.len()];
        Param { shape, value, grad, kind: ParamKind::Weight }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Param { shape, value, grad: Vec::new(), kind: ParamKind::Buffer }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}
