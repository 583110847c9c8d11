//! Page discovery, ground-truth decoding, crop grids, sample plans and the
//! datamodule abstraction.

mod crop;
mod cropped;
mod encoding;
mod grid;
mod page;
pub mod synth;

use std::collections::BTreeMap;

pub use crop::{
    compute_dataset_stats, draw_subcrop_origin, export_patches, extract_patch, random_subcrop, select_training_pages,
    CropSample, DatasetStats,
};
pub use cropped::{CroppedPages, CroppedPagesConfig};
pub use encoding::{decode_gt_pixel, ClassEncoding, BOUNDARY_BIT};
pub use grid::{build_crop_grid, CropGrid};
pub use page::{
    decode_label_image, decode_rgb_image, discover_split, encode_label_png, encode_rgb_png, load_page, LabelMap, Page,
    PageRecord, MAX_DECODE_BYTES,
};

use crate::config::Value;
use crate::nn::Tensor;
use crate::seed::SeedState;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: String, message: String },
    #[error("{page}: illegal ground-truth pixel 0x{value:06X} at ({x}, {y})")]
    IllegalPixel { page: String, x: usize, y: usize, value: u32 },
    #[error("illegal ground-truth value 0x{0:06X}")]
    IllegalValue(u32),
    #[error("{page}: image is {image_w}x{image_h} but ground truth is {gt_w}x{gt_h}")]
    DimensionMismatch { page: String, image_w: usize, image_h: usize, gt_w: usize, gt_h: usize },
    #[error("crop {crop} does not fit a {width}x{height} page")]
    CropTooLarge { crop: usize, width: usize, height: usize },
    #[error("overlap {0} outside [0, 1)")]
    BadOverlap(f64),
    #[error("crop size must be positive")]
    ZeroCrop,
    #[error("window at ({x}, {y}) of size {size} leaves the {width}x{height} page")]
    OutOfBounds { x: usize, y: usize, size: usize, width: usize, height: usize },
    #[error("sub-crop {out} larger than patch {crop}")]
    SubcropTooLarge { out: usize, crop: usize },
    #[error("selection of {n} pages out of {available} available")]
    Selection { n: usize, available: usize },
    #[error("{0}")]
    Empty(String),
    #[error("{split} split: no ground truth for {stem}")]
    MissingGt { split: String, stem: String },
    #[error("{0}")]
    Invalid(String),
    #[error("datamodule used before prepare()")]
    NotPrepared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// One network input window: a grid patch plus the sub-crop offset inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct SampleSpec {
    pub page: usize,
    pub patch_x: usize,
    pub patch_y: usize,
    pub offset_x: usize,
    pub offset_y: usize,
    pub size: usize,
}

impl SampleSpec {
    pub fn origin(&self) -> (usize, usize) {
        (self.patch_x + self.offset_x, self.patch_y + self.offset_y)
    }
}

/// Normalized images `(N, C, S, S)` and their class labels `(N * S * S)`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub specs: Vec<SampleSpec>,
}

/// A page to be predicted at test time, with its crop grid.
#[derive(Debug, Clone)]
pub struct TestPage {
    pub index: usize,
    pub page_id: String,
    pub width: usize,
    pub height: usize,
    pub grid: CropGrid,
}

/// Dataset discovery, splits, statistics and sample delivery.
pub trait DataModule: Send {
    fn num_classes(&self) -> usize;

    fn in_channels(&self) -> usize;

    fn class_names(&self) -> Vec<String>;

    /// Spatial size of every training and validation input.
    fn input_size(&self) -> usize;

    /// Values offered to `${datamodule:...}` interpolations.
    fn exports(&self) -> BTreeMap<String, Value>;

    /// Load pages and compute statistics. Idempotent.
    fn prepare(&mut self) -> Result<(), DataError>;

    fn stats(&self) -> Option<DatasetStats>;

    fn train_plan(&self, epoch: usize, seeds: &SeedState) -> Result<Vec<SampleSpec>, DataError>;

    fn val_plan(&self, epoch: usize, seeds: &SeedState) -> Result<Vec<SampleSpec>, DataError>;

    fn test_pages(&self) -> Result<Vec<TestPage>, DataError>;

    /// Windows for one test page, in grid order.
    fn test_specs(&self, page: &TestPage) -> Vec<SampleSpec> {
        page.grid
            .positions()
            .map(|(x, y)| SampleSpec { page: page.index, patch_x: x, patch_y: y, offset_x: 0, offset_y: 0, size: page.grid.crop_size })
            .collect()
    }

    fn load(&self, split: Split, specs: &[SampleSpec]) -> Result<Batch, DataError>;

    fn ground_truth(&self, split: Split, page: usize) -> Result<&LabelMap, DataError>;

    fn encoding(&self) -> &ClassEncoding;
}
