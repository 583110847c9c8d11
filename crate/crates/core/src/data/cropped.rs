use super::crop::{draw_subcrop_origin, grid_stats, select_training_pages, DatasetStats, PATCH_SEPARATOR};
use super::encoding::ClassEncoding;
use super::grid::{build_crop_grid, CropGrid};
use super::page::{discover_split, load_page, LabelMap, Page, PageRecord};
use super::{Batch, DataError, DataModule, SampleSpec, Split, TestPage};
use crate::config::Value;
use crate::nn::Tensor;
use crate::seed::{SeedState, Stream};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub struct CroppedPagesConfig {
    pub root: PathBuf,
    /// Grid patch size for training and validation.
    pub crop_size: usize,
    pub overlap: f64,
    /// Random sub-crop size fed to the network; `None` uses the whole patch.
    pub input_size: Option<usize>,
    /// Number of training pages; `None` uses all.
    pub selection_train: Option<usize>,
    /// Test grid patch size; `None` uses the network input size.
    pub test_crop_size: Option<usize>,
    pub test_overlap: f64,
    /// Files are patches produced by `export_patches`; selection counts source pages.
    pub precropped: bool,
}

impl Default for CroppedPagesConfig {
    fn default() -> Self {
        CroppedPagesConfig {
            root: PathBuf::from("data"),
            crop_size: 300,
            overlap: 0.5,
            input_size: Some(256),
            selection_train: None,
            test_crop_size: None,
            test_overlap: 0.5,
            precropped: false,
        }
    }
}

/// Pages held in memory and cut on the fly into grid patches with random
/// sub-crops.
pub struct CroppedPages {
    cfg: CroppedPagesConfig,
    encoding: ClassEncoding,
    train: Vec<Page>,
    val: Vec<Page>,
    test: Vec<Page>,
    stats: Option<DatasetStats>,
}

impl CroppedPages {
    pub fn new(cfg: CroppedPagesConfig, encoding: ClassEncoding) -> Result<Self, DataError> {
        let input = cfg.input_size.unwrap_or(cfg.crop_size);
        if cfg.crop_size == 0 || input == 0 {
            return Err(DataError::ZeroCrop);
        }
        if input > cfg.crop_size {
            return Err(DataError::SubcropTooLarge { out: input, crop: cfg.crop_size });
        }
        for o in [cfg.overlap, cfg.test_overlap] {
            if !(0.0..1.0).contains(&o) {
                return Err(DataError::BadOverlap(o));
            }
        }
        if cfg.selection_train == Some(0) {
            return Err(DataError::Selection { n: 0, available: 0 });
        }
        Ok(CroppedPages { cfg, encoding, train: Vec::new(), val: Vec::new(), test: Vec::new(), stats: None })
    }

    /// Use pages already in memory instead of reading `root`.
    pub fn from_pages(cfg: CroppedPagesConfig, encoding: ClassEncoding, train: Vec<Page>, val: Vec<Page>, test: Vec<Page>) -> Result<Self, DataError> {
        let mut dm = Self::new(cfg, encoding)?;
        let train = match dm.cfg.selection_train {
            Some(n) if n > train.len() => return Err(DataError::Selection { n, available: train.len() }),
            Some(n) => train.into_iter().take(n).collect(),
            None => train,
        };
        dm.train = train;
        dm.val = val;
        dm.test = test;
        dm.compute_stats()?;
        Ok(dm)
    }

    pub fn config(&self) -> &CroppedPagesConfig {
        &self.cfg
    }

    pub fn pages(&self, split: Split) -> &[Page] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn test_crop(&self) -> usize {
        self.cfg.test_crop_size.unwrap_or(self.input_size())
    }

    fn discover(&self, split: Split) -> Result<Vec<PageRecord>, DataError> {
        let dir = self.cfg.root.join(split.dir_name());
        if !dir.exists() && split != Split::Train {
            return Ok(Vec::new());
        }
        discover_split(&self.cfg.root, split)
    }

    fn select(&self, records: Vec<PageRecord>) -> Result<Vec<PageRecord>, DataError> {
        let Some(n) = self.cfg.selection_train else { return Ok(records) };
        if !self.cfg.precropped {
            return select_training_pages(&records, n);
        }
        let source = |r: &PageRecord| r.page_id.split(PATCH_SEPARATOR).next().unwrap_or_default().to_string();
        let mut sources: Vec<String> = records.iter().map(source).collect();
        sources.sort();
        sources.dedup();
        if n > sources.len() {
            return Err(DataError::Selection { n, available: sources.len() });
        }
        let keep = &sources[..n];
        Ok(records.into_iter().filter(|r| keep.contains(&source(r))).collect())
    }

    fn compute_stats(&mut self) -> Result<(), DataError> {
        if self.train.is_empty() {
            return Err(DataError::Empty("training split has no pages".into()));
        }
        let pages: Vec<&Page> = self.train.iter().collect();
        self.stats = Some(grid_stats(&pages, self.cfg.crop_size, self.cfg.overlap)?);
        Ok(())
    }

    fn grid_plan(&self, pages: &[Page], crop: usize, overlap: f64) -> Result<Vec<SampleSpec>, DataError> {
        let mut specs = Vec::new();
        for (i, p) in pages.iter().enumerate() {
            let g = build_crop_grid(p.width(), p.height(), crop, overlap)?;
            specs.extend(g.positions().map(|(x, y)| SampleSpec { page: i, patch_x: x, patch_y: y, offset_x: 0, offset_y: 0, size: crop }));
        }
        Ok(specs)
    }

    fn with_subcrops(&self, mut specs: Vec<SampleSpec>, rng: &mut impl rand::Rng) -> Result<Vec<SampleSpec>, DataError> {
        let out = self.input_size();
        for s in specs.iter_mut() {
            let (dx, dy) = draw_subcrop_origin(self.cfg.crop_size, out, rng)?;
            s.offset_x = dx;
            s.offset_y = dy;
            s.size = out;
        }
        Ok(specs)
    }

    fn require_prepared(&self) -> Result<DatasetStats, DataError> {
        self.stats.ok_or(DataError::NotPrepared)
    }
}

impl DataModule for CroppedPages {
    fn num_classes(&self) -> usize {
        self.encoding.num_classes()
    }

    fn in_channels(&self) -> usize {
        3
    }

    fn class_names(&self) -> Vec<String> {
        self.encoding.names().to_vec()
    }

    fn input_size(&self) -> usize {
        self.cfg.input_size.unwrap_or(self.cfg.crop_size)
    }

    fn exports(&self) -> BTreeMap<String, Value> {
        let mut m = BTreeMap::new();
        m.insert("num_classes".into(), Value::Int(self.num_classes() as i64));
        m.insert("in_channels".into(), Value::Int(3));
        m.insert("crop_size".into(), Value::Int(self.cfg.crop_size as i64));
        m.insert("input_size".into(), Value::Int(self.input_size() as i64));
        m
    }

    fn prepare(&mut self) -> Result<(), DataError> {
        if self.stats.is_some() {
            return Ok(());
        }
        let train = self.select(self.discover(Split::Train)?)?;
        let val = self.discover(Split::Val)?;
        let test = self.discover(Split::Test)?;
        let load = |recs: &[PageRecord]| recs.iter().map(|r| load_page(r, &self.encoding)).collect::<Result<Vec<_>, _>>();
        let (train, val, test) = (load(&train)?, load(&val)?, load(&test)?);
        self.train = train;
        self.val = val;
        self.test = test;
        for p in self.train.iter().chain(&self.val) {
            if p.width() < self.cfg.crop_size || p.height() < self.cfg.crop_size {
                return Err(DataError::CropTooLarge { crop: self.cfg.crop_size, width: p.width(), height: p.height() });
            }
        }
        self.compute_stats()
    }

    fn stats(&self) -> Option<DatasetStats> {
        self.stats
    }

    fn train_plan(&self, epoch: usize, seeds: &SeedState) -> Result<Vec<SampleSpec>, DataError> {
        self.require_prepared()?;
        let mut specs = self.grid_plan(&self.train, self.cfg.crop_size, self.cfg.overlap)?;
        specs.shuffle(&mut seeds.epoch_rng(Stream::Shuffle, epoch));
        self.with_subcrops(specs, &mut seeds.epoch_rng(Stream::Subcrop, epoch))
    }

    /// Validation re-seeds its generator identically every epoch, so each
    /// epoch scores the same windows.
    fn val_plan(&self, _epoch: usize, seeds: &SeedState) -> Result<Vec<SampleSpec>, DataError> {
        self.require_prepared()?;
        let specs = self.grid_plan(&self.val, self.cfg.crop_size, self.cfg.overlap)?;
        self.with_subcrops(specs, &mut seeds.epoch_rng(Stream::Val, 0))
    }

    fn test_pages(&self) -> Result<Vec<TestPage>, DataError> {
        self.require_prepared()?;
        let crop = self.test_crop();
        self.test
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let grid: CropGrid = build_crop_grid(p.width(), p.height(), crop, self.cfg.test_overlap)?;
                Ok(TestPage { index: i, page_id: p.record.page_id.clone(), width: p.width(), height: p.height(), grid })
            })
            .collect()
    }

    fn load(&self, split: Split, specs: &[SampleSpec]) -> Result<Batch, DataError> {
        let stats = self.require_prepared()?;
        let pages = self.pages(split);
        let size = specs.first().map_or(0, |s| s.size);
        let plane = size * size;
        let mut images = vec![0f32; specs.len() * 3 * plane];
        let mut labels = Vec::with_capacity(specs.len() * plane);
        let scale: [f32; 3] = std::array::from_fn(|c| if stats.std[c] > 0.0 { (1.0 / (255.0 * stats.std[c])) as f32 } else { 1.0 / 255.0 });
        let shift: [f32; 3] = std::array::from_fn(|c| if stats.std[c] > 0.0 { (stats.mean[c] / stats.std[c]) as f32 } else { stats.mean[c] as f32 });
        for (n, s) in specs.iter().enumerate() {
            if s.size != size {
                return Err(DataError::Invalid("a batch mixes window sizes".into()));
            }
            let page = pages.get(s.page).ok_or_else(|| DataError::Invalid(format!("{split} page {} does not exist", s.page)))?;
            let (x, y) = s.origin();
            if x + size > page.width() || y + size > page.height() {
                return Err(DataError::OutOfBounds { x, y, size, width: page.width(), height: page.height() });
            }
            let raw = page.image.as_raw();
            let base = n * 3 * plane;
            for row in 0..size {
                let src = (y + row) * page.width() + x;
                for col in 0..size {
                    let px = &raw[(src + col) * 3..(src + col) * 3 + 3];
                    for c in 0..3 {
                        images[base + c * plane + row * size + col] = px[c] as f32 * scale[c] - shift[c];
                    }
                }
                labels.extend_from_slice(&page.labels.classes[src..src + size]);
            }
        }
        Ok(Batch { images: Tensor::from_vec([specs.len(), 3, size, size], images), labels, specs: specs.to_vec() })
    }

    fn ground_truth(&self, split: Split, page: usize) -> Result<&LabelMap, DataError> {
        self.pages(split).get(page).map(|p| &p.labels).ok_or_else(|| DataError::Invalid(format!("{split} page {page} does not exist")))
    }

    fn encoding(&self) -> &ClassEncoding {
        &self.encoding
    }
}
