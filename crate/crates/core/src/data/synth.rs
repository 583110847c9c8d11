//! Synthetic page corpus for desk-scale runs: a parchment-toned page with
//! one rectangle of text-like strokes per foreground class, labelled in the
//! same ground-truth format as real pages.

use super::encoding::ClassEncoding;
use super::page::{encode_label_png, encode_rgb_png, LabelMap, Page};
use super::{DataError, Split};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::path::Path;

/// Base colour per class index of [`ClassEncoding::hisdb`].
pub const CLASS_COLORS: [[u8; 3]; 8] = [
    [215, 195, 150],
    [180, 30, 30],
    [30, 150, 30],
    [150, 90, 20],
    [40, 40, 160],
    [140, 40, 140],
    [20, 140, 150],
    [60, 60, 60],
];

const NOISE: i32 = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthConfig {
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { size: 512, train: 3, val: 1, test: 1, seed: 0 }
    }
}

fn jitter(c: u8, rng: &mut impl Rng) -> u8 {
    (c as i32 + rng.gen_range(-NOISE..=NOISE)).clamp(0, 255) as u8
}

fn darken(c: [u8; 3]) -> [u8; 3] {
    c.map(|v| (v as u32 * 7 / 10) as u8)
}

/// One page. Every foreground class gets one rectangle in its own cell of
/// a 3x3 layout; rectangle borders carry the boundary flag.
pub fn generate_page(page_id: &str, size: usize, rng: &mut ChaCha8Rng) -> Result<Page, DataError> {
    if size < 48 {
        return Err(DataError::Invalid(format!("synthetic page size {size} below 48")));
    }
    let mut classes = vec![0u8; size * size];
    let mut boundary = vec![false; size * size];
    let mut ink = vec![false; size * size];
    let cell = size / 3;
    let mut cells: Vec<usize> = (0..9).collect();
    cells.shuffle(rng);
    for (k, &cidx) in cells.iter().take(7).enumerate() {
        let class = (k + 1) as u8;
        let (cx, cy) = ((cidx % 3) * cell, (cidx / 3) * cell);
        let w = rng.gen_range(cell * 45 / 100..=cell * 9 / 10);
        let h = rng.gen_range(cell * 45 / 100..=cell * 9 / 10);
        let x0 = cx + rng.gen_range(0..=cell - w);
        let y0 = cy + rng.gen_range(0..=cell - h);
        let line_phase = rng.gen_range(0..9);
        let mut word_break = rng.gen_range(12..30);
        for y in y0..y0 + h {
            let stroke_row = (y - y0 + line_phase) % 9 < 3;
            for x in x0..x0 + w {
                let i = y * size + x;
                classes[i] = class;
                boundary[i] = x == x0 || y == y0 || x == x0 + w - 1 || y == y0 + h - 1;
                if stroke_row && (x - x0) % word_break > 2 {
                    ink[i] = true;
                }
            }
            if stroke_row && (y - y0 + line_phase) % 9 == 2 {
                word_break = rng.gen_range(12..30);
            }
        }
    }
    let mut image = RgbImage::new(size as u32, size as u32);
    for (i, px) in image.pixels_mut().enumerate() {
        let base = CLASS_COLORS[classes[i] as usize];
        let c = if ink[i] { darken(base) } else { base };
        *px = Rgb([jitter(c[0], rng), jitter(c[1], rng), jitter(c[2], rng)]);
    }
    Page::from_parts(page_id, image, LabelMap::new(size, size, classes, boundary))
}

/// Write a corpus under `<root>/{train,val,test}/{data,gt}/`.
pub fn write_corpus(root: &Path, cfg: &SynthConfig) -> Result<usize, DataError> {
    let encoding = ClassEncoding::hisdb();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut written = 0;
    for (split, count) in [(Split::Train, cfg.train), (Split::Val, cfg.val), (Split::Test, cfg.test)] {
        let data = root.join(split.dir_name()).join("data");
        let gt = root.join(split.dir_name()).join("gt");
        for d in [&data, &gt] {
            fs::create_dir_all(d).map_err(|source| DataError::Io { path: d.display().to_string(), source })?;
        }
        for i in 0..count {
            let id = format!("{}-{:03}", split.dir_name(), i);
            let page = generate_page(&id, cfg.size, &mut rng)?;
            let name = format!("{id}.png");
            for (path, bytes) in [
                (data.join(&name), encode_rgb_png(&page.image)?),
                (gt.join(&name), encode_label_png(&page.labels, &encoding)?),
            ] {
                fs::write(&path, bytes).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
            }
            written += 1;
        }
    }
    Ok(written)
}
