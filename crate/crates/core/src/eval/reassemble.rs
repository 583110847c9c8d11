use super::EvalError;
use crate::data::LabelMap;
use crate::nn::argmax;

/// Class probabilities of one square crop, laid out `(classes, size, size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub size: usize,
    pub classes: usize,
    pub data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(size: usize, classes: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), size * size * classes);
        ProbabilityMap { size, classes, data }
    }

    /// One-hot probabilities for a label crop.
    pub fn one_hot(size: usize, classes: usize, labels: &[u8]) -> Self {
        let plane = size * size;
        let mut data = vec![0f32; classes * plane];
        for (i, &l) in labels.iter().enumerate() {
            data[l as usize * plane + i] = 1.0;
        }
        ProbabilityMap { size, classes, data }
    }
}

/// Accumulates overlapping crops of one page; pixels take the argmax of
/// the mean probability over covering crops, ties to the lowest index.
pub struct Reassembler {
    width: usize,
    height: usize,
    classes: usize,
    sums: Vec<f32>,
    hits: Vec<u32>,
}

impl Reassembler {
    pub fn new(width: usize, height: usize, classes: usize) -> Self {
        Reassembler { width, height, classes, sums: vec![0.0; width * height * classes], hits: vec![0; width * height] }
    }

    pub fn add(&mut self, origin: (usize, usize), crop: &ProbabilityMap) -> Result<(), EvalError> {
        let (x, y) = origin;
        let s = crop.size;
        if crop.classes != self.classes {
            return Err(EvalError::ClassCountMismatch { left: self.classes, right: crop.classes });
        }
        if x.checked_add(s).is_none_or(|e| e > self.width) || y.checked_add(s).is_none_or(|e| e > self.height) {
            return Err(EvalError::OriginOutOfBounds { x, y, size: s, width: self.width, height: self.height });
        }
        let plane = s * s;
        for row in 0..s {
            for col in 0..s {
                let p = (y + row) * self.width + x + col;
                self.hits[p] += 1;
                let dst = &mut self.sums[p * self.classes..(p + 1) * self.classes];
                for (c, d) in dst.iter_mut().enumerate() {
                    *d += crop.data[c * plane + row * s + col];
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<LabelMap, EvalError> {
        let mut classes = Vec::with_capacity(self.width * self.height);
        let mut mean = vec![0f32; self.classes];
        for (p, &h) in self.hits.iter().enumerate() {
            if h == 0 {
                return Err(EvalError::Uncovered { x: p % self.width, y: p / self.width });
            }
            for (m, s) in mean.iter_mut().zip(&self.sums[p * self.classes..(p + 1) * self.classes]) {
                *m = s / h as f32;
            }
            classes.push(argmax(&mean) as u8);
        }
        Ok(LabelMap::from_classes(self.width, self.height, classes))
    }
}

pub fn reassemble_page(crops: &[((usize, usize), ProbabilityMap)], width: usize, height: usize) -> Result<LabelMap, EvalError> {
    let classes = crops.first().map_or(1, |(_, c)| c.classes);
    let mut r = Reassembler::new(width, height, classes);
    for (origin, crop) in crops {
        r.add(*origin, crop)?;
    }
    r.finish()
}
