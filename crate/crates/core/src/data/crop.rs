use super::encoding::ClassEncoding;
use super::grid::build_crop_grid;
use super::page::{encode_label_png, encode_rgb_png, LabelMap, Page, PageRecord};
use super::DataError;
use image::RgbImage;
use rand::Rng;
use std::fs;
use std::path::{Path, PathBuf};

/// A square window cut from a page, pixels in row-major RGB order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropSample {
    pub page_id: String,
    pub x: usize,
    pub y: usize,
    pub crop_size: usize,
    pub image: Vec<u8>,
    pub labels: Vec<u8>,
    pub boundary: Vec<bool>,
    /// Offset inside the original patch after [`random_subcrop`].
    pub subcrop: Option<(usize, usize)>,
}

fn check_window(page: &Page, x: usize, y: usize, size: usize) -> Result<(), DataError> {
    let (w, h) = (page.width(), page.height());
    if size == 0 || x.checked_add(size).is_none_or(|e| e > w) || y.checked_add(size).is_none_or(|e| e > h) {
        return Err(DataError::OutOfBounds { x, y, size, width: w, height: h });
    }
    Ok(())
}

pub fn extract_patch(page: &Page, x: usize, y: usize, crop_size: usize) -> Result<CropSample, DataError> {
    check_window(page, x, y, crop_size)?;
    let n = crop_size * crop_size;
    let mut image = Vec::with_capacity(n * 3);
    let mut labels = Vec::with_capacity(n);
    let mut boundary = Vec::with_capacity(n);
    let w = page.width();
    let raw = page.image.as_raw();
    for row in y..y + crop_size {
        let start = row * w + x;
        image.extend_from_slice(&raw[start * 3..(start + crop_size) * 3]);
        labels.extend_from_slice(&page.labels.classes[start..start + crop_size]);
        boundary.extend_from_slice(&page.labels.boundary[start..start + crop_size]);
    }
    Ok(CropSample { page_id: page.record.page_id.clone(), x, y, crop_size, image, labels, boundary, subcrop: None })
}

/// Uniform origin in `[0, crop - out]^2`, x drawn first.
pub fn draw_subcrop_origin<R: Rng + ?Sized>(crop: usize, out: usize, rng: &mut R) -> Result<(usize, usize), DataError> {
    if out > crop || out == 0 {
        return Err(DataError::SubcropTooLarge { out, crop });
    }
    let span = crop - out;
    let dx = rng.gen_range(0..=span);
    let dy = rng.gen_range(0..=span);
    Ok((dx, dy))
}

/// Cut a random `out_size` square from `patch`; image and labels share the origin.
pub fn random_subcrop<R: Rng + ?Sized>(patch: &CropSample, out_size: usize, rng: &mut R) -> Result<CropSample, DataError> {
    let (dx, dy) = draw_subcrop_origin(patch.crop_size, out_size, rng)?;
    let c = patch.crop_size;
    let mut image = Vec::with_capacity(out_size * out_size * 3);
    let mut labels = Vec::with_capacity(out_size * out_size);
    let mut boundary = Vec::with_capacity(out_size * out_size);
    for row in dy..dy + out_size {
        let start = row * c + dx;
        image.extend_from_slice(&patch.image[start * 3..(start + out_size) * 3]);
        labels.extend_from_slice(&patch.labels[start..start + out_size]);
        boundary.extend_from_slice(&patch.boundary[start..start + out_size]);
    }
    let (px, py) = patch.subcrop.unwrap_or((0, 0));
    Ok(CropSample {
        page_id: patch.page_id.clone(),
        x: patch.x,
        y: patch.y,
        crop_size: out_size,
        image,
        labels,
        boundary,
        subcrop: Some((px + dx, py + dy)),
    })
}

/// First `n` pages in filename order.
pub fn select_training_pages(pages: &[PageRecord], n: usize) -> Result<Vec<PageRecord>, DataError> {
    if n == 0 || n > pages.len() {
        return Err(DataError::Selection { n, available: pages.len() });
    }
    let mut sorted = pages.to_vec();
    sorted.sort_by(|a, b| file_name(&a.image_path).cmp(&file_name(&b.image_path)).then(a.page_id.cmp(&b.page_id)));
    sorted.truncate(n);
    Ok(sorted)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Per-channel mean and population standard deviation on the `[0, 1]` scale.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Exact moments from per-channel 8-bit histograms.
#[derive(Debug, Clone)]
pub(crate) struct Histogram {
    counts: [[u64; 256]; 3],
}

impl Histogram {
    pub fn new() -> Self {
        Histogram { counts: [[0; 256]; 3] }
    }

    pub fn add_rgb(&mut self, rgb: &[u8], weight: u64) {
        for px in rgb.chunks_exact(3) {
            for c in 0..3 {
                self.counts[c][px[c] as usize] += weight;
            }
        }
    }

    pub fn finish(&self) -> Option<DatasetStats> {
        let n: u64 = self.counts[0].iter().sum();
        if n == 0 {
            return None;
        }
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let m = self.counts[c].iter().enumerate().map(|(v, &k)| k as f64 * v as f64).sum::<f64>() / (255.0 * n as f64);
            let var = self.counts[c]
                .iter()
                .enumerate()
                .map(|(v, &k)| {
                    let d = v as f64 / 255.0 - m;
                    k as f64 * d * d
                })
                .sum::<f64>()
                / n as f64;
            mean[c] = m;
            std[c] = var.sqrt();
        }
        Some(DatasetStats { mean, std })
    }
}

pub fn compute_dataset_stats<'a, I>(samples: I) -> Result<DatasetStats, DataError>
where
    I: IntoIterator<Item = &'a CropSample>,
{
    let mut h = Histogram::new();
    for s in samples {
        h.add_rgb(&s.image, 1);
    }
    h.finish().ok_or_else(|| DataError::Empty("no samples for statistics".into()))
}

/// Statistics over every patch of each page's grid without materializing
/// the patches: a pixel counts once per patch that covers it.
pub(crate) fn grid_stats(pages: &[&Page], crop: usize, overlap: f64) -> Result<DatasetStats, DataError> {
    let mut h = Histogram::new();
    for page in pages {
        let g = build_crop_grid(page.width(), page.height(), crop, overlap)?;
        let cover = |positions: &[usize], dim: usize| {
            let mut delta = vec![0i64; dim + 1];
            for &p in positions {
                delta[p] += 1;
                delta[p + crop] -= 1;
            }
            let mut run = 0i64;
            delta[..dim]
                .iter()
                .map(|d| {
                    run += d;
                    run as u64
                })
                .collect::<Vec<u64>>()
        };
        let cx = cover(&g.x_positions, page.width());
        let cy = cover(&g.y_positions, page.height());
        let raw = page.image.as_raw();
        let w = page.width();
        for (y, &wy) in cy.iter().enumerate() {
            for (x, &wx) in cx.iter().enumerate() {
                let i = (y * w + x) * 3;
                h.add_rgb(&raw[i..i + 3], wx * wy);
            }
        }
    }
    h.finish().ok_or_else(|| DataError::Empty("no pages for statistics".into()))
}

/// Separator between the source page id and the patch origin in exported names.
pub(crate) const PATCH_SEPARATOR: &str = "__";

/// Write every grid patch of `pages` as `<out>/data/<id>__y<Y>_x<X>.png`
/// with matching ground truth under `<out>/gt/`.
pub fn export_patches(
    pages: &[Page],
    crop: usize,
    overlap: f64,
    encoding: &ClassEncoding,
    out: &Path,
) -> Result<Vec<PathBuf>, DataError> {
    let data_dir = out.join("data");
    let gt_dir = out.join("gt");
    for d in [&data_dir, &gt_dir] {
        fs::create_dir_all(d).map_err(|source| DataError::Io { path: d.display().to_string(), source })?;
    }
    let mut written = Vec::new();
    for page in pages {
        let grid = build_crop_grid(page.width(), page.height(), crop, overlap)?;
        for (x, y) in grid.positions() {
            let s = extract_patch(page, x, y, crop)?;
            let name = format!("{}{PATCH_SEPARATOR}y{y:06}_x{x:06}.png", page.record.page_id);
            let img = RgbImage::from_raw(crop as u32, crop as u32, s.image).expect("patch size");
            let lm = LabelMap::new(crop, crop, s.labels, s.boundary);
            for (path, bytes) in [(data_dir.join(&name), encode_rgb_png(&img)?), (gt_dir.join(&name), encode_label_png(&lm, encoding)?)] {
                fs::write(&path, bytes).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
            }
            written.push(data_dir.join(&name));
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn page(w: usize, h: usize, seed: u64) -> Page {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let classes: Vec<u8> = (0..w * h).map(|_| rng.gen_range(0..8)).collect();
        let boundary: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.1)).collect();
        Page::from_parts("p", RgbImage::from_raw(w as u32, h as u32, raw).unwrap(), LabelMap::new(w, h, classes, boundary)).unwrap()
    }

    #[test]
    fn patches_are_pixel_exact_and_overlaps_agree() {
        let p = page(40, 30, 1);
        let a = extract_patch(&p, 5, 3, 20).unwrap();
        let b = extract_patch(&p, 15, 8, 20).unwrap();
        for yy in 8..23 {
            for xx in 15..25 {
                let ia = (yy - 3) * 20 + (xx - 5);
                let ib = (yy - 8) * 20 + (xx - 15);
                assert_eq!(a.labels[ia], b.labels[ib]);
                assert_eq!(a.image[ia * 3..ia * 3 + 3], b.image[ib * 3..ib * 3 + 3]);
                assert_eq!(a.labels[ia], p.labels.get(xx, yy));
                assert_eq!(a.image[ia * 3..ia * 3 + 3], p.image.get_pixel(xx as u32, yy as u32).0);
            }
        }
        assert!(matches!(extract_patch(&p, 21, 0, 20), Err(DataError::OutOfBounds { .. })));
        assert!(matches!(extract_patch(&p, usize::MAX, 0, 20), Err(DataError::OutOfBounds { .. })));
    }

    #[test]
    fn uniform_background_patch() {
        let img = RgbImage::from_pixel(8, 8, image::Rgb([10, 20, 30]));
        let p = Page::from_parts("u", img, LabelMap::from_classes(8, 8, vec![0; 64])).unwrap();
        assert!(extract_patch(&p, 0, 0, 8).unwrap().labels.iter().all(|&c| c == 0));
    }

    #[test]
    fn subcrop_identity_bounds_and_determinism() {
        let p = page(300, 300, 2);
        let patch = extract_patch(&p, 0, 0, 300).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = random_subcrop(&patch, 300, &mut rng).unwrap();
        assert_eq!(same.subcrop, Some((0, 0)));
        assert_eq!(same.image, patch.image);

        let origins = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| random_subcrop(&patch, 256, &mut r).unwrap().subcrop.unwrap()).collect::<Vec<_>>()
        };
        let a = origins(7);
        assert_eq!(a, origins(7));
        assert!(a.iter().all(|&(x, y)| x <= 44 && y <= 44));

        let mut r = ChaCha8Rng::seed_from_u64(3);
        let s = random_subcrop(&patch, 100, &mut r).unwrap();
        let (dx, dy) = s.subcrop.unwrap();
        assert_eq!(s.labels[0], p.labels.get(dx, dy));
        assert_eq!(s.labels[99 * 100 + 99], p.labels.get(dx + 99, dy + 99));
        assert!(random_subcrop(&patch, 301, &mut r).is_err());
    }

    #[test]
    fn selection_is_a_sorted_prefix() {
        let recs: Vec<PageRecord> = ["c", "a", "b"]
            .iter()
            .map(|n| PageRecord {
                page_id: n.to_string(),
                image_path: PathBuf::from(format!("{n}.png")),
                gt_path: PathBuf::new(),
                width: 1,
                height: 1,
            })
            .collect();
        let ids = |n| select_training_pages(&recs, n).unwrap().into_iter().map(|r| r.page_id).collect::<Vec<_>>();
        assert_eq!(ids(1), ["a"]);
        assert_eq!(ids(3), ["a", "b", "c"]);
        assert_eq!(ids(2)[..], ids(3)[..2]);
        assert!(select_training_pages(&recs, 0).is_err());
        assert!(select_training_pages(&recs, 4).is_err());
    }

    fn naive_stats(samples: &[CropSample]) -> DatasetStats {
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let vals: Vec<f64> = samples.iter().flat_map(|s| s.image.iter().skip(c).step_by(3).map(|&v| v as f64 / 255.0)).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            mean[c] = m;
            std[c] = v.sqrt();
        }
        DatasetStats { mean, std }
    }

    #[test]
    fn stats_match_naive_two_pass() {
        let p = page(50, 50, 3);
        let samples: Vec<_> = [(0, 0), (10, 10), (20, 5), (30, 30)].iter().map(|&(x, y)| extract_patch(&p, x, y, 20).unwrap()).collect();
        let fast = compute_dataset_stats(&samples).unwrap();
        let slow = naive_stats(&samples);
        for c in 0..3 {
            assert!((fast.mean[c] - slow.mean[c]).abs() < 1e-6);
            assert!((fast.std[c] - slow.std[c]).abs() < 1e-6);
        }
        assert!(compute_dataset_stats(&[]).is_err());
    }

    #[test]
    fn constant_images() {
        for v in [0u8, 77, 255] {
            let s = CropSample {
                page_id: "c".into(),
                x: 0,
                y: 0,
                crop_size: 2,
                image: vec![v; 12],
                labels: vec![0; 4],
                boundary: vec![false; 4],
                subcrop: None,
            };
            let st = compute_dataset_stats([&s]).unwrap();
            for c in 0..3 {
                assert!((st.mean[c] - v as f64 / 255.0).abs() < 1e-15);
                assert_eq!(st.std[c], 0.0);
            }
        }
    }

    #[test]
    fn weighted_grid_stats_equal_patch_stats() {
        let p = page(70, 45, 4);
        let g = build_crop_grid(70, 45, 30, 0.5).unwrap();
        let samples: Vec<_> = g.positions().map(|(x, y)| extract_patch(&p, x, y, 30).unwrap()).collect();
        let a = compute_dataset_stats(&samples).unwrap();
        let b = grid_stats(&[&p], 30, 0.5).unwrap();
        for c in 0..3 {
            assert!((a.mean[c] - b.mean[c]).abs() < 1e-12);
            assert!((a.std[c] - b.std[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn export_writes_every_patch() {
        let d = tempfile::tempdir().unwrap();
        let mut p = page(50, 50, 5);
        p.labels.boundary.iter_mut().for_each(|b| *b = false);
        let files = export_patches(&[p], 30, 0.5, &ClassEncoding::hisdb(), d.path()).unwrap();
        assert_eq!(files.len(), 9);
        assert!(d.path().join("gt").join(files[0].file_name().unwrap()).is_file());
    }
}
