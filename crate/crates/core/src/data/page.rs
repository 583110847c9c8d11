use super::encoding::{is_boundary, ClassEncoding};
use super::{DataError, Split};
use image::{ImageFormat, ImageReader, Limits, RgbImage};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

/// Upper bound on decoder allocations for one image.
pub const MAX_DECODE_BYTES: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct PageRecord {
    pub page_id: String,
    pub image_path: PathBuf,
    pub gt_path: PathBuf,
    pub width: usize,
    pub height: usize,
}

/// Decoded ground truth: dense class indices plus the boundary flag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<u8>,
    pub boundary: Vec<bool>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, classes: Vec<u8>, boundary: Vec<bool>) -> Self {
        assert_eq!(classes.len(), width * height);
        assert_eq!(boundary.len(), width * height);
        LabelMap { width, height, classes, boundary }
    }

    pub fn from_classes(width: usize, height: usize, classes: Vec<u8>) -> Self {
        let n = classes.len();
        Self::new(width, height, classes, vec![false; n])
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.classes[y * self.width + x]
    }
}

/// A page held in memory.
#[derive(Debug, Clone)]
pub struct Page {
    pub record: PageRecord,
    pub image: RgbImage,
    pub labels: LabelMap,
}

impl Page {
    pub fn from_parts(page_id: &str, image: RgbImage, labels: LabelMap) -> Result<Self, DataError> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        if (w, h) != (labels.width, labels.height) {
            return Err(DataError::DimensionMismatch {
                page: page_id.to_string(),
                image_w: w,
                image_h: h,
                gt_w: labels.width,
                gt_h: labels.height,
            });
        }
        Ok(Page {
            record: PageRecord {
                page_id: page_id.to_string(),
                image_path: PathBuf::new(),
                gt_path: PathBuf::new(),
                width: w,
                height: h,
            },
            image,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.record.width
    }

    pub fn height(&self) -> usize {
        self.record.height
    }
}

fn decode_png(bytes: &[u8], max_bytes: u64) -> Result<image::DynamicImage, String> {
    let mut reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let mut limits = Limits::default();
    limits.max_alloc = Some(max_bytes);
    reader.limits(limits);
    reader.decode().map_err(|e| e.to_string())
}

/// Decode a PNG to 8-bit RGB.
pub fn decode_rgb_image(bytes: &[u8], max_bytes: u64) -> Result<RgbImage, DataError> {
    decode_png(bytes, max_bytes)
        .map(|img| img.to_rgb8())
        .map_err(|message| DataError::Decode { path: "<buffer>".into(), message })
}

/// Decode a ground-truth PNG. Pixel `(r, g, b)` is read as `0xRRGGBB`.
pub fn decode_label_image(bytes: &[u8], encoding: &ClassEncoding, max_bytes: u64) -> Result<LabelMap, DataError> {
    let rgb = decode_rgb_image(bytes, max_bytes)?;
    labels_from_rgb(&rgb, encoding, "<buffer>")
}

fn labels_from_rgb(rgb: &RgbImage, encoding: &ClassEncoding, page: &str) -> Result<LabelMap, DataError> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut classes = Vec::with_capacity(w * h);
    let mut boundary = Vec::with_capacity(w * h);
    for (i, p) in rgb.pixels().enumerate() {
        let v = (p[0] as u32) << 16 | (p[1] as u32) << 8 | p[2] as u32;
        let c = encoding.decode(v).map_err(|_| DataError::IllegalPixel { page: page.to_string(), x: i % w, y: i / w, value: v })?;
        classes.push(c);
        boundary.push(is_boundary(v));
    }
    Ok(LabelMap { width: w, height: h, classes, boundary })
}

/// Encode class indices (and boundary flags) in the ground-truth format.
pub fn encode_label_png(labels: &LabelMap, encoding: &ClassEncoding) -> Result<Vec<u8>, DataError> {
    let mut img = RgbImage::new(labels.width as u32, labels.height as u32);
    for (i, p) in img.pixels_mut().enumerate() {
        let v = encoding.encode(labels.classes[i], labels.boundary[i])?;
        *p = image::Rgb([(v >> 16) as u8, (v >> 8) as u8, v as u8]);
    }
    encode_rgb_png(&img)
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>, DataError> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| DataError::Decode { path: "<buffer>".into(), message: e.to_string() })?;
    Ok(out.into_inner())
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

fn png_dimensions(path: &Path) -> Result<(usize, usize), DataError> {
    image::image_dimensions(path)
        .map(|(w, h)| (w as usize, h as usize))
        .map_err(|e| DataError::Decode { path: path.display().to_string(), message: e.to_string() })
}

/// List `<root>/<split>/data/*.png` in filename order and pair each with
/// `<root>/<split>/gt/<stem>.png`.
pub fn discover_split(root: &Path, split: Split) -> Result<Vec<PageRecord>, DataError> {
    let data_dir = root.join(split.dir_name()).join("data");
    let gt_dir = root.join(split.dir_name()).join("gt");
    let entries = fs::read_dir(&data_dir).map_err(|source| DataError::Io { path: data_dir.display().to_string(), source })?;
    let mut files = Vec::new();
    for e in entries {
        let e = e.map_err(|source| DataError::Io { path: data_dir.display().to_string(), source })?;
        let p = e.path();
        if p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            files.push(p);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    let mut out = Vec::with_capacity(files.len());
    for image_path in files {
        let stem = image_path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let gt_path = gt_dir.join(format!("{stem}.png"));
        if !gt_path.is_file() {
            return Err(DataError::MissingGt { split: split.to_string(), stem });
        }
        let (w, h) = png_dimensions(&image_path)?;
        let (gw, gh) = png_dimensions(&gt_path)?;
        if (w, h) != (gw, gh) {
            return Err(DataError::DimensionMismatch { page: stem, image_w: w, image_h: h, gt_w: gw, gt_h: gh });
        }
        out.push(PageRecord { page_id: stem, image_path, gt_path, width: w, height: h });
    }
    Ok(out)
}

pub fn load_page(record: &PageRecord, encoding: &ClassEncoding) -> Result<Page, DataError> {
    fn with_path(path: &Path) -> impl Fn(DataError) -> DataError + '_ {
        move |e| match e {
            DataError::Decode { message, .. } => DataError::Decode { path: path.display().to_string(), message },
            other => other,
        }
    }
    let image = decode_rgb_image(&read(&record.image_path)?, MAX_DECODE_BYTES).map_err(with_path(&record.image_path))?;
    let gt = decode_rgb_image(&read(&record.gt_path)?, MAX_DECODE_BYTES).map_err(with_path(&record.gt_path))?;
    let labels = labels_from_rgb(&gt, encoding, &record.page_id)?;
    let mut page = Page::from_parts(&record.page_id, image, labels)?;
    page.record = record.clone();
    Ok(page)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_png_round_trip() {
        let e = ClassEncoding::hisdb();
        let classes: Vec<u8> = (0..12).map(|i| (i % 8) as u8).collect();
        let boundary: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let lm = LabelMap::new(4, 3, classes, boundary);
        let png = encode_label_png(&lm, &e).unwrap();
        assert_eq!(decode_label_image(&png, &e, MAX_DECODE_BYTES).unwrap(), lm);
    }

    #[test]
    fn illegal_pixel_reports_coordinates() {
        let mut img = RgbImage::from_pixel(3, 2, image::Rgb([0, 0, 1]));
        img.put_pixel(2, 1, image::Rgb([0, 0, 3]));
        let png = encode_rgb_png(&img).unwrap();
        match decode_label_image(&png, &ClassEncoding::hisdb(), MAX_DECODE_BYTES) {
            Err(DataError::IllegalPixel { x: 2, y: 1, value: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn garbage_is_an_error() {
        assert!(decode_label_image(b"not a png", &ClassEncoding::hisdb(), MAX_DECODE_BYTES).is_err());
    }

    #[test]
    fn discovery_sorts_and_pairs() {
        let d = tempfile::tempdir().unwrap();
        let e = ClassEncoding::hisdb();
        for split in ["train"] {
            fs::create_dir_all(d.path().join(split).join("data")).unwrap();
            fs::create_dir_all(d.path().join(split).join("gt")).unwrap();
        }
        for name in ["p10", "p02", "p1"] {
            let img = RgbImage::new(5, 4);
            fs::write(d.path().join("train/data").join(format!("{name}.png")), encode_rgb_png(&img).unwrap()).unwrap();
            let lm = LabelMap::from_classes(5, 4, vec![0; 20]);
            fs::write(d.path().join("train/gt").join(format!("{name}.png")), encode_label_png(&lm, &e).unwrap()).unwrap();
        }
        let recs = discover_split(d.path(), Split::Train).unwrap();
        let ids: Vec<_> = recs.iter().map(|r| r.page_id.as_str()).collect();
        assert_eq!(ids, ["p02", "p1", "p10"]);
        let page = load_page(&recs[0], &e).unwrap();
        assert_eq!((page.width(), page.height()), (5, 4));

        fs::remove_file(d.path().join("train/gt/p1.png")).unwrap();
        assert!(matches!(discover_split(d.path(), Split::Train), Err(DataError::MissingGt { .. })));
    }
}
