//! Point-annotated datasets: the JSON schema, validation, near-duplicate
//! detection and train/test splitting.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::metrics::ssim;

pub const SCHEMA_VERSION: &str = "1.0";

/// A single object centroid in sub-pixel image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub x: f64,
    pub y: f64,
    #[serde(rename = "class")]
    pub class_label: String,
}

impl PointAnnotation {
    pub fn new(x: f64, y: f64, class_label: impl Into<String>) -> Self {
        Self {
            x,
            y,
            class_label: class_label.into(),
        }
    }

    pub fn xy(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    /// Relative to the annotation file's directory.
    #[serde(rename = "file")]
    pub image_path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub points: Vec<PointAnnotation>,
}

impl AnnotatedImage {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn coords(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(PointAnnotation::xy).collect()
    }

    /// Check dimensions and point bounds. `label_set` of `None` skips the class check.
    pub fn validate(&self, label_set: Option<&[String]>) -> Result<()> {
        let name = self.image_path.display();
        if self.width == 0 || self.height == 0 {
            return Err(Error::Validation(format!(
                "image {name}: dimensions must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h) {
                return Err(Error::Validation(format!(
                    "image {name}: point {i} at ({}, {}) lies outside [0, {}) x [0, {})",
                    p.x, p.y, self.width, self.height
                )));
            }
            if let Some(labels) = label_set {
                if !labels.iter().any(|l| *l == p.class_label) {
                    return Err(Error::Validation(format!(
                        "image {name}: point {i} has undeclared class {:?}",
                        p.class_label
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Contents of one annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub version: String,
    pub label_set: Vec<String>,
    pub images: Vec<AnnotatedImage>,
}

impl AnnotationSet {
    pub fn new(label_set: Vec<String>, images: Vec<AnnotatedImage>) -> Self {
        Self {
            version: SCHEMA_VERSION.into(),
            label_set,
            images,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported annotation version {:?}",
                self.version
            )));
        }
        let mut seen = BTreeSet::new();
        for img in &self.images {
            if !seen.insert(&img.image_path) {
                return Err(Error::Validation(format!(
                    "image {} is listed twice",
                    img.image_path.display()
                )));
            }
            img.validate(Some(&self.label_set))?;
        }
        Ok(())
    }

    /// Look up an image entry by its relative path.
    pub fn find(&self, image_path: &Path) -> Option<&AnnotatedImage> {
        self.images.iter().find(|i| i.image_path == image_path)
    }
}

const TOP_KEYS: &[&str] = &["version", "label_set", "images"];
const IMAGE_KEYS: &[&str] = &["file", "width", "height", "points"];
const POINT_KEYS: &[&str] = &["x", "y", "class"];

fn unknown_keys(value: &Value) -> Vec<String> {
    fn check(v: &Value, allowed: &[&str], at: &str, out: &mut Vec<String>) {
        if let Value::Object(map) = v {
            for k in map.keys().filter(|k| !allowed.contains(&k.as_str())) {
                out.push(if at.is_empty() { k.clone() } else { format!("{at}.{k}") });
            }
        }
    }
    let mut out = Vec::new();
    check(value, TOP_KEYS, "", &mut out);
    if let Some(images) = value.get("images").and_then(Value::as_array) {
        for (i, img) in images.iter().enumerate() {
            check(img, IMAGE_KEYS, &format!("images[{i}]"), &mut out);
            if let Some(points) = img.get("points").and_then(Value::as_array) {
                for (j, p) in points.iter().enumerate() {
                    check(p, POINT_KEYS, &format!("images[{i}].points[{j}]"), &mut out);
                }
            }
        }
    }
    out
}

/// Parse annotation JSON text. In strict mode unknown keys are an error;
/// otherwise they are logged and ignored.
pub fn parse_annotations(text: &str, origin: &Path, strict: bool) -> Result<AnnotationSet> {
    let schema = |message: String| Error::Schema {
        path: origin.into(),
        message,
    };
    let value: Value = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
    let extra = unknown_keys(&value);
    if !extra.is_empty() {
        let msg = format!("unknown keys: {}", extra.join(", "));
        if strict {
            return Err(schema(msg));
        }
        log::warn!("{}: {msg}", origin.display());
    }
    // Re-parse from text so serde reports line/column for type errors.
    let set: AnnotationSet = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
    set.validate()?;
    Ok(set)
}

pub fn load_annotations_with(path: &Path, strict: bool) -> Result<AnnotationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path, strict)
}

/// Load and validate an annotation file, warning on unknown keys.
pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    load_annotations_with(path, false)
}

pub fn save_annotations(path: &Path, set: &AnnotationSet) -> Result<()> {
    set.validate()?;
    let mut text = serde_json::to_vec_pretty(set).expect("annotations serialize");
    text.push(b'\n');
    crate::io::write_atomic(path, &text)
}

/// Directory that image paths in an annotation file are relative to.
pub fn base_dir(annotation_file: &Path) -> PathBuf {
    annotation_file
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

/// All unordered pairs of images whose grayscale SSIM exceeds `ssim_threshold`.
///
/// Pairs are returned with the lexicographically smaller path first, sorted.
/// Images of different sizes are never reported.
pub fn find_near_duplicates(
    images: &[AnnotatedImage],
    base: &Path,
    ssim_threshold: f64,
) -> Result<Vec<(PathBuf, PathBuf)>> {
    if !(ssim_threshold > 0.0 && ssim_threshold <= 1.0) {
        return Err(Error::Validation(format!(
            "ssim_threshold must lie in (0, 1], got {ssim_threshold}"
        )));
    }
    let mut entries: Vec<&AnnotatedImage> = images.iter().collect();
    entries.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    entries.dedup_by(|a, b| a.image_path == b.image_path);
    let grays = entries
        .iter()
        .map(|img| crate::imaging::load_gray(&base.join(&img.image_path)))
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::new();
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            if grays[i].dims() != grays[j].dims() {
                continue;
            }
            if ssim(&grays[i], &grays[j], Some(255.0))? > ssim_threshold {
                pairs.push((entries[i].image_path.clone(), entries[j].image_path.clone()));
            }
        }
    }
    Ok(pairs)
}

/// Remove the later member of every duplicate pair.
pub fn drop_later(images: &[AnnotatedImage], pairs: &[(PathBuf, PathBuf)]) -> Vec<AnnotatedImage> {
    let drop: BTreeSet<&PathBuf> = pairs.iter().map(|(a, b)| a.max(b)).collect();
    images
        .iter()
        .filter(|img| !drop.contains(&img.image_path))
        .cloned()
        .collect()
}

/// Default validation crop `(width, height)`.
pub const DEFAULT_VALIDATION_CROP: (u32, u32) = (768, 576);

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<AnnotatedImage>,
    pub test: Vec<AnnotatedImage>,
    pub validation_crop: (u32, u32),
}

/// Seeded random train/test partition with `round(n * train_fraction)`
/// training images (clamped so both sides are non-empty). Each side keeps
/// the input order.
pub fn split_dataset(images: &[AnnotatedImage], train_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Split(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = images.len();
    if n < 2 {
        return Err(Error::Split(format!("need at least 2 images to split, got {n}")));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (train, test) = images
        .iter()
        .zip(&is_train)
        .fold((Vec::new(), Vec::new()), |(mut tr, mut te), (img, &t)| {
            if t {
                tr.push(img.clone());
            } else {
                te.push(img.clone());
            }
            (tr, te)
        });
    Ok(DatasetSplit {
        train,
        test,
        validation_crop: DEFAULT_VALIDATION_CROP,
    })
}

/// A crop window `(x0, y0, width, height)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
}

impl CropWindow {
    pub fn full(width: u32, height: u32) -> Self {
        Self {
            x0: 0,
            y0: 0,
            width,
            height,
        }
    }

    /// Uniformly placed `crop` window inside a `width x height` image; the
    /// crop is shrunk to the image when it does not fit.
    pub fn random<R: Rng + ?Sized>(width: u32, height: u32, crop: (u32, u32), rng: &mut R) -> Self {
        let (cw, ch) = (crop.0.min(width), crop.1.min(height));
        Self {
            x0: rng.gen_range(0..=width - cw),
            y0: rng.gen_range(0..=height - ch),
            width: cw,
            height: ch,
        }
    }

    /// Annotation of the cropped region with shifted coordinates.
    pub fn apply(&self, img: &AnnotatedImage) -> AnnotatedImage {
        let (x0, y0) = (self.x0 as f64, self.y0 as f64);
        let (x1, y1) = (x0 + self.width as f64, y0 + self.height as f64);
        AnnotatedImage {
            image_path: img.image_path.clone(),
            width: self.width,
            height: self.height,
            points: img
                .points
                .iter()
                .filter(|p| p.x >= x0 && p.x < x1 && p.y >= y0 && p.y < y1)
                .map(|p| PointAnnotation::new(p.x - x0, p.y - y0, p.class_label.clone()))
                .collect(),
        }
    }
}

/// One fixed, seeded crop window per test image.
pub fn validation_crops(test: &[AnnotatedImage], crop: (u32, u32), seed: u64) -> Vec<CropWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    test.iter()
        .map(|img| CropWindow::random(img.width, img.height, crop, &mut rng))
        .collect()
}
