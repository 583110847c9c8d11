use super::EvalError;
use crate::data::LabelMap;

/// `counts[gt * n + pred]` pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { n: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn add(&mut self, gt: u8, pred: u8) -> Result<(), EvalError> {
        let (g, p) = (gt as usize, pred as usize);
        if g >= self.n || p >= self.n {
            return Err(EvalError::ClassOutOfRange { class: g.max(p), num_classes: self.n });
        }
        self.counts[g * self.n + p] += 1;
        Ok(())
    }

    /// Count aligned label slices.
    pub fn add_slices(&mut self, gt: &[u8], pred: &[u8]) -> Result<(), EvalError> {
        if gt.len() != pred.len() {
            return Err(EvalError::LengthMismatch { gt: gt.len(), pred: pred.len() });
        }
        for (&g, &p) in gt.iter().zip(pred) {
            self.add(g, p)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), EvalError> {
        if other.n != self.n {
            return Err(EvalError::ClassCountMismatch { left: self.n, right: other.n });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.n).filter(|&g| g != c).map(|g| self.get(g, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.n).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    /// Ground-truth pixel count of class `c`.
    pub fn support(&self, c: usize) -> u64 {
        (0..self.n).map(|p| self.get(c, p)).sum()
    }

    /// `None` for classes absent from both ground truth and prediction.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let (tp, fp, fneg) = (self.true_positives(c), self.false_positives(c), self.false_negatives(c));
                let denom = tp + fp + fneg;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn f1_per_class(&self) -> Vec<Option<f64>> {
        (0..self.n)
            .map(|c| {
                let (tp, fp, fneg) = (self.true_positives(c), self.false_positives(c), self.false_negatives(c));
                let denom = 2 * tp + fp + fneg;
                (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean of `num_c / den_c` over classes with `den_c > 0`, summed as an
    /// exact fraction and rounded once when it fits in 128 bits.
    fn mean_of_ratios(ratios: impl Iterator<Item = (u64, u64)>) -> Result<f64, EvalError> {
        let present: Vec<(u64, u64)> = ratios.filter(|&(_, d)| d > 0).collect();
        if present.is_empty() {
            return Err(EvalError::EmptyMatrix);
        }
        let k = present.len() as u128;
        let exact = present.iter().try_fold((0u128, 1u128), |(n, d), &(a, b)| {
            let (a, b) = (a as u128, b as u128);
            let num = n.checked_mul(b)?.checked_add(a.checked_mul(d)?)?;
            let den = d.checked_mul(b)?;
            let g = gcd(num, den);
            Some((num / g, den / g))
        });
        if let Some((n, d)) = exact.and_then(|(n, d)| Some((n, d.checked_mul(k)?))) {
            let g = gcd(n, d);
            let (n, d) = (n / g, d / g);
            if n < (1 << 53) && d < (1 << 53) {
                return Ok(n as f64 / d as f64);
            }
        }
        Ok(present.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / present.len() as f64)
    }

    pub fn miou(&self) -> Result<f64, EvalError> {
        Self::mean_of_ratios((0..self.n).map(|c| {
            let tp = self.true_positives(c);
            (tp, tp + self.false_positives(c) + self.false_negatives(c))
        }))
    }

    pub fn macro_f1(&self) -> Result<f64, EvalError> {
        Self::mean_of_ratios((0..self.n).map(|c| {
            let tp = self.true_positives(c);
            (2 * tp, 2 * tp + self.false_positives(c) + self.false_negatives(c))
        }))
    }

    /// Per-class F1 weighted by ground-truth support.
    pub fn weighted_f1(&self) -> Result<f64, EvalError> {
        let total = self.total();
        if total == 0 {
            return Err(EvalError::EmptyMatrix);
        }
        Ok(self
            .f1_per_class()
            .iter()
            .enumerate()
            .map(|(c, f)| f.unwrap_or(0.0) * self.support(c) as f64)
            .sum::<f64>()
            / total as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64, EvalError> {
        let total = self.total();
        if total == 0 {
            return Err(EvalError::EmptyMatrix);
        }
        Ok((0..self.n).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a.max(1)
}

/// Count every pixel of `pred` against `gt`, skipping ground-truth
/// boundary pixels when `ignore_boundary` is set.
pub fn accumulate_confusion(pred: &LabelMap, gt: &LabelMap, ignore_boundary: bool, num_classes: usize) -> Result<ConfusionMatrix, EvalError> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(EvalError::DimensionMismatch { pred: (pred.width, pred.height), gt: (gt.width, gt.height) });
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for i in 0..gt.classes.len() {
        if ignore_boundary && gt.boundary[i] {
            continue;
        }
        cm.add(gt.classes[i], pred.classes[i])?;
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_worked_two_by_two() {
        let gt = LabelMap::from_classes(2, 2, vec![0, 1, 1, 1]);
        let pred = LabelMap::from_classes(2, 2, vec![0, 1, 0, 1]);
        let cm = accumulate_confusion(&pred, &gt, false, 8).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(1, 1), cm.get(1, 0), cm.total()), (1, 2, 1, 4));
        assert_eq!(cm.miou().unwrap(), 7.0 / 12.0);
        assert_eq!(cm.macro_f1().unwrap(), 11.0 / 15.0);
    }

    #[test]
    fn perfect_and_wrong() {
        let gt = LabelMap::from_classes(3, 1, vec![3, 3, 3]);
        let cm = accumulate_confusion(&gt, &gt, false, 8).unwrap();
        assert_eq!(cm.get(3, 3), 3);
        assert_eq!(cm.total(), 3);
        assert_eq!(cm.miou().unwrap(), 1.0);
        assert_eq!(cm.macro_f1().unwrap(), 1.0);
        let gt = LabelMap::from_classes(2, 1, vec![0, 1]);
        let pred = LabelMap::from_classes(2, 1, vec![2, 2]);
        let cm = accumulate_confusion(&pred, &gt, false, 3).unwrap();
        assert_eq!(cm.iou_per_class()[0], Some(0.0));
        assert_eq!(cm.iou_per_class()[1], Some(0.0));
    }

    #[test]
    fn boundary_pixels_can_be_ignored() {
        let gt = LabelMap::new(2, 1, vec![0, 1], vec![false, true]);
        let pred = LabelMap::from_classes(2, 1, vec![0, 0]);
        assert_eq!(accumulate_confusion(&pred, &gt, false, 2).unwrap().total(), 2);
        let cm = accumulate_confusion(&pred, &gt, true, 2).unwrap();
        assert_eq!(cm.total(), 1);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        let a = LabelMap::from_classes(2, 1, vec![0, 1]);
        let b = LabelMap::from_classes(1, 2, vec![0, 1]);
        assert!(matches!(accumulate_confusion(&a, &b, false, 2), Err(EvalError::DimensionMismatch { .. })));
        assert!(matches!(accumulate_confusion(&a, &a, false, 1), Err(EvalError::ClassOutOfRange { .. })));
        assert!(matches!(ConfusionMatrix::new(4).miou(), Err(EvalError::EmptyMatrix)));
    }
}
