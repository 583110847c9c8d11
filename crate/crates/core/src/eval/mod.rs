//! Full-page reassembly of crop predictions and pixel-level metrics.

mod confusion;
mod metric;
mod reassemble;

pub use confusion::{accumulate_confusion, ConfusionMatrix};
pub use metric::{ConfusionMetric, Metric, MetricKind};
pub use reassemble::{reassemble_page, ProbabilityMap, Reassembler};

use crate::data::{decode_label_image, ClassEncoding, DataError, LabelMap, MAX_DECODE_BYTES};
use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction is {pred:?} but ground truth is {gt:?}")]
    DimensionMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("{gt} ground-truth labels but {pred} predictions")]
    LengthMismatch { gt: usize, pred: usize },
    #[error("class {class} outside 0..{num_classes}")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("class counts differ: {left} vs {right}")]
    ClassCountMismatch { left: usize, right: usize },
    #[error("pixel ({x}, {y}) is covered by no crop")]
    Uncovered { x: usize, y: usize },
    #[error("crop at ({x}, {y}) of size {size} leaves the {width}x{height} page")]
    OriginOutOfBounds { x: usize, y: usize, size: usize, width: usize, height: usize },
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("no prediction for page `{0}`")]
    MissingPrediction(String),
    #[error("prediction for unknown page `{0}`")]
    UnexpectedPrediction(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Data { path: String, source: DataError },
}

/// Scores of one confusion matrix.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Scores {
    pub iou: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
    pub miou: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub pixel_accuracy: f64,
    pub pixels: u64,
}

impl Scores {
    pub fn from_matrix(cm: &ConfusionMatrix) -> Result<Self, EvalError> {
        Ok(Scores {
            iou: cm.iou_per_class(),
            f1: cm.f1_per_class(),
            miou: cm.miou()?,
            macro_f1: cm.macro_f1()?,
            weighted_f1: cm.weighted_f1()?,
            pixel_accuracy: cm.pixel_accuracy()?,
            pixels: cm.total(),
        })
    }
}

/// Corpus scores from the summed matrix, plus per-page scores.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MetricReport {
    pub class_names: Vec<String>,
    pub corpus: Scores,
    pub pages: Vec<(String, Scores)>,
    pub ignore_boundary: bool,
}

/// Pair predictions with ground truth by page id; every id must be present
/// on both sides.
pub fn evaluate_corpus(
    predictions: &BTreeMap<String, LabelMap>,
    ground_truth: &BTreeMap<String, LabelMap>,
    class_names: &[String],
    ignore_boundary: bool,
) -> Result<MetricReport, EvalError> {
    if let Some(extra) = predictions.keys().find(|k| !ground_truth.contains_key(*k)) {
        return Err(EvalError::UnexpectedPrediction(extra.clone()));
    }
    let n = class_names.len();
    let mut total = ConfusionMatrix::new(n);
    let mut pages = Vec::with_capacity(ground_truth.len());
    for (id, gt) in ground_truth {
        let pred = predictions.get(id).ok_or_else(|| EvalError::MissingPrediction(id.clone()))?;
        let cm = accumulate_confusion(pred, gt, ignore_boundary, n)?;
        total.merge(&cm)?;
        if cm.total() > 0 {
            pages.push((id.clone(), Scores::from_matrix(&cm)?));
        }
    }
    Ok(MetricReport { class_names: class_names.to_vec(), corpus: Scores::from_matrix(&total)?, pages, ignore_boundary })
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn pct_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), pct)
}

/// Class name usable as a summary key.
fn key_name(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '+' { c } else { '_' }).collect()
}

impl MetricReport {
    /// Human-readable report, percentages with two decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.corpus;
        let _ = writeln!(s, "pages: {}  pixels: {}  boundary pixels: {}", self.pages.len(), c.pixels, if self.ignore_boundary { "ignored" } else { "evaluated" });
        let _ = writeln!(s, "mIoU: {}%  F1 (macro): {}%  F1 (weighted): {}%  pixel accuracy: {}%", pct(c.miou), pct(c.macro_f1), pct(c.weighted_f1), pct(c.pixel_accuracy));
        let width = self.class_names.iter().map(String::len).max().unwrap_or(5).max(5);
        let _ = writeln!(s, "\n{:<width$}  {:>7}  {:>7}", "class", "IoU%", "F1%");
        for (i, name) in self.class_names.iter().enumerate() {
            let _ = writeln!(s, "{:<width$}  {:>7}  {:>7}", name, pct_opt(c.iou[i]), pct_opt(c.f1[i]));
        }
        if !self.pages.is_empty() {
            let _ = writeln!(s, "\n{:<24}  {:>7}  {:>7}", "page", "mIoU%", "F1%");
            for (id, p) in &self.pages {
                let _ = writeln!(s, "{:<24}  {:>7}  {:>7}", id, pct(p.miou), pct(p.macro_f1));
            }
        }
        s
    }

    /// `key=value` lines, percentages with two decimals.
    pub fn to_summary(&self) -> String {
        let c = &self.corpus;
        let mut s = String::new();
        let _ = writeln!(s, "pages={}", self.pages.len());
        let _ = writeln!(s, "pixels={}", c.pixels);
        let _ = writeln!(s, "ignore_boundary={}", self.ignore_boundary);
        let _ = writeln!(s, "miou={}", pct(c.miou));
        let _ = writeln!(s, "f1_macro={}", pct(c.macro_f1));
        let _ = writeln!(s, "f1_weighted={}", pct(c.weighted_f1));
        let _ = writeln!(s, "pixel_accuracy={}", pct(c.pixel_accuracy));
        for (i, name) in self.class_names.iter().enumerate() {
            let _ = writeln!(s, "iou.{}={}", key_name(name), pct_opt(c.iou[i]));
            let _ = writeln!(s, "f1.{}={}", key_name(name), pct_opt(c.f1[i]));
        }
        for (id, p) in &self.pages {
            let _ = writeln!(s, "page.{id}.miou={}", pct(p.miou));
            let _ = writeln!(s, "page.{id}.f1_macro={}", pct(p.macro_f1));
        }
        s
    }
}

fn read_label_dir(dir: &Path, encoding: &ClassEncoding) -> Result<BTreeMap<String, LabelMap>, EvalError> {
    let io = |source| EvalError::Io { path: dir.display().to_string(), source };
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if !path.is_file() || !path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            continue;
        }
        let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let bytes = fs::read(&path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
        let labels = decode_label_image(&bytes, encoding, MAX_DECODE_BYTES)
            .map_err(|source| EvalError::Data { path: path.display().to_string(), source })?;
        out.insert(id, labels);
    }
    Ok(out)
}

/// Evaluate every ground-truth PNG in `gt_dir` against the same-stem PNG in `pred_dir`.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, encoding: &ClassEncoding, ignore_boundary: bool) -> Result<MetricReport, EvalError> {
    let gt = read_label_dir(gt_dir, encoding)?;
    let pred = read_label_dir(pred_dir, encoding)?;
    evaluate_corpus(&pred, &gt, encoding.names(), ignore_boundary)
}
