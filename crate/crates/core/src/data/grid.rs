use super::DataError;

/// Top-left offsets of overlapping square crops tiling a page.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct CropGrid {
    pub crop_size: usize,
    pub stride: usize,
    pub x_positions: Vec<usize>,
    pub y_positions: Vec<usize>,
}

impl CropGrid {
    pub fn len(&self) -> usize {
        self.x_positions.len() * self.y_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Origins in row-major order.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.y_positions.iter().flat_map(move |&y| self.x_positions.iter().map(move |&x| (x, y)))
    }
}

fn offsets(dim: usize, crop: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    while o + crop < dim {
        out.push(o);
        o += stride;
    }
    let last = dim - crop;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// Stride is `round(crop * (1 - overlap))`, at least 1. Offsets advance by
/// the stride while the crop ends inside the page, then one crop is
/// snapped to the far border.
pub fn build_crop_grid(width: usize, height: usize, crop: usize, overlap: f64) -> Result<CropGrid, DataError> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(DataError::BadOverlap(overlap));
    }
    if crop == 0 {
        return Err(DataError::ZeroCrop);
    }
    if crop > width || crop > height {
        return Err(DataError::CropTooLarge { crop, width, height });
    }
    let stride = ((crop as f64 * (1.0 - overlap)).round() as usize).max(1);
    Ok(CropGrid {
        crop_size: crop,
        stride,
        x_positions: offsets(width, crop, stride),
        y_positions: offsets(height, crop, stride),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        let g = build_crop_grid(300, 300, 300, 0.5).unwrap();
        assert_eq!(g.positions().collect::<Vec<_>>(), vec![(0, 0)]);
        let g = build_crop_grid(500, 500, 300, 0.5).unwrap();
        assert_eq!(g.x_positions, vec![0, 150, 200]);
        assert_eq!(g.len(), 9);
        let g = build_crop_grid(512, 512, 256, 0.5).unwrap();
        assert_eq!(g.x_positions, vec![0, 128, 256]);
    }

    #[test]
    fn invalid_arguments() {
        assert!(matches!(build_crop_grid(200, 400, 300, 0.5), Err(DataError::CropTooLarge { .. })));
        assert!(matches!(build_crop_grid(400, 400, 300, 1.0), Err(DataError::BadOverlap(_))));
        assert!(matches!(build_crop_grid(400, 400, 300, -0.1), Err(DataError::BadOverlap(_))));
        assert!(matches!(build_crop_grid(400, 400, 300, f64::NAN), Err(DataError::BadOverlap(_))));
        assert!(matches!(build_crop_grid(400, 400, 0, 0.5), Err(DataError::ZeroCrop)));
    }

    #[test]
    fn extreme_overlap_still_terminates() {
        let g = build_crop_grid(10, 10, 5, 0.99).unwrap();
        assert_eq!(g.stride, 1);
        assert_eq!(g.x_positions, (0..=5).collect::<Vec<_>>());
    }
}
