//! Supervision rasters from point annotations: adaptive-sigma Gaussian
//! density maps and binary disk segmentation maps.

mod kdtree;

pub use kdtree::KdTree;

use serde::{Deserialize, Serialize};

use crate::annotations::AnnotatedImage;
use crate::error::{Error, Result};
use crate::raster::Raster;

/// How per-object Gaussian widths are derived from nearest-neighbor spacing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaPolicy {
    /// Fraction of the distance to the nearest other object.
    pub ratio: f64,
    /// Width used when an image holds a single object.
    pub fallback_sigma: f64,
    /// Lower clamp, so coincident points still get a proper kernel.
    pub min_sigma: f64,
}

impl SigmaPolicy {
    pub const FLOWER_RATIO: f64 = 0.15;
    pub const FRUIT_RATIO: f64 = 0.25;

    pub fn with_ratio(ratio: f64) -> Self {
        Self {
            ratio,
            ..Self::default()
        }
    }

    pub fn flower() -> Self {
        Self::with_ratio(Self::FLOWER_RATIO)
    }

    pub fn fruit() -> Self {
        Self::with_ratio(Self::FRUIT_RATIO)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ratio", self.ratio),
            ("fallback_sigma", self.fallback_sigma),
            ("min_sigma", self.min_sigma),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("sigma policy {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        Self {
            ratio: Self::FLOWER_RATIO,
            fallback_sigma: 8.0,
            min_sigma: 1.0,
        }
    }
}

/// Per-point sigma: `max(min_sigma, ratio * nearest-other distance)`, or
/// `fallback_sigma` for a lone point. Order follows the input.
pub fn compute_adaptive_sigmas(points: &[(f64, f64)], policy: &SigmaPolicy) -> Vec<f64> {
    match points.len() {
        0 => Vec::new(),
        1 => vec![policy.fallback_sigma],
        n => {
            let tree = KdTree::new(points);
            (0..n)
                .map(|i| {
                    let d = tree.nearest_other_distance(i).expect("at least two points");
                    (policy.ratio * d).max(policy.min_sigma)
                })
                .collect()
        }
    }
}

/// Kernel truncation radius in pixels.
pub fn kernel_radius(sigma: f64) -> usize {
    (4.0 * sigma).ceil() as usize
}

/// Pixel that a sub-pixel coordinate rounds to, clamped inside `[0, len)`.
pub fn rounded_pixel(v: f64, len: usize) -> usize {
    (v.round().max(0.0) as usize).min(len - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    pub data: Raster<f32>,
    /// Aligned with the source points.
    pub sigmas: Vec<f64>,
}

impl DensityMap {
    pub fn count(&self) -> f64 {
        self.data.total()
    }

    pub fn mean_sigma(&self) -> Option<f64> {
        (!self.sigmas.is_empty()).then(|| self.sigmas.iter().sum::<f64>() / self.sigmas.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap {
    pub data: Raster<u8>,
}

impl SegmentationMap {
    pub fn foreground(&self) -> usize {
        self.data.data().iter().filter(|&&v| v == 1).count()
    }
}

/// Add one unit-mass Gaussian centred on the pixel nearest `(x, y)`, truncated
/// at `kernel_radius(sigma)` and renormalized over the part inside the image.
fn splat(acc: &mut [f64], w: usize, h: usize, x: f64, y: f64, sigma: f64) {
    let cx = rounded_pixel(x, w) as isize;
    let cy = rounded_pixel(y, h) as isize;
    let r = kernel_radius(sigma) as isize;
    let x0 = (cx - r).max(0);
    let x1 = (cx + r).min(w as isize - 1);
    let y0 = (cy - r).max(0);
    let y1 = (cy + r).min(h as isize - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    // The isotropic kernel is separable; its clipped sum is the product of the 1-D sums.
    let gx: Vec<f64> = (x0..=x1).map(|x| (-((x - cx) as f64).powi(2) * inv).exp()).collect();
    let gy: Vec<f64> = (y0..=y1).map(|y| (-((y - cy) as f64).powi(2) * inv).exp()).collect();
    let norm = gx.iter().sum::<f64>() * gy.iter().sum::<f64>();
    for (yy, &vy) in (y0..=y1).zip(&gy) {
        let row = &mut acc[yy as usize * w..(yy as usize + 1) * w];
        let s = vy / norm;
        for (dst, &vx) in row[x0 as usize..=x1 as usize].iter_mut().zip(&gx) {
            *dst += s * vx;
        }
    }
}

/// Density map with the given per-point sigmas.
pub fn density_with_sigmas(image: &AnnotatedImage, sigmas: Vec<f64>) -> Result<DensityMap> {
    image.validate(None)?;
    if sigmas.len() != image.points.len() {
        return Err(Error::Contract(format!(
            "{} sigmas for {} points",
            sigmas.len(),
            image.points.len()
        )));
    }
    let (w, h) = (image.width as usize, image.height as usize);
    let mut acc = vec![0.0f64; w * h];
    for (p, &s) in image.points.iter().zip(&sigmas) {
        splat(&mut acc, w, h, p.x, p.y, s);
    }
    let data = Raster::from_vec(w, h, acc.into_iter().map(|v| v as f32).collect())?;
    Ok(DensityMap { data, sigmas })
}

pub fn make_density_map(image: &AnnotatedImage, policy: &SigmaPolicy) -> Result<DensityMap> {
    policy.validate()?;
    let sigmas = compute_adaptive_sigmas(&image.coords(), policy);
    density_with_sigmas(image, sigmas)
}

/// Union of disks of radius `2 sigma` around each centroid, tested at integer
/// pixel centres. The rounded centroid pixel is always foreground.
pub fn make_segmentation_map(image: &AnnotatedImage, sigmas: &[f64]) -> Result<SegmentationMap> {
    image.validate(None)?;
    if sigmas.len() != image.points.len() {
        return Err(Error::Contract(format!(
            "{} sigmas for {} points",
            sigmas.len(),
            image.points.len()
        )));
    }
    let (w, h) = (image.width as usize, image.height as usize);
    let mut data = Raster::<u8>::new(w, h);
    for (p, &s) in image.points.iter().zip(sigmas) {
        let r = 2.0 * s;
        let r2 = r * r;
        let x0 = (p.x - r).ceil().max(0.0) as usize;
        let x1 = ((p.x + r).floor() as isize).min(w as isize - 1);
        let y0 = (p.y - r).ceil().max(0.0) as usize;
        let y1 = ((p.y + r).floor() as isize).min(h as isize - 1);
        for y in y0 as isize..=y1 {
            for x in x0 as isize..=x1 {
                let (dx, dy) = (x as f64 - p.x, y as f64 - p.y);
                if dx * dx + dy * dy <= r2 {
                    data.set(x as usize, y as usize, 1);
                }
            }
        }
        data.set(rounded_pixel(p.x, w), rounded_pixel(p.y, h), 1);
    }
    Ok(SegmentationMap { data })
}

/// Both supervision rasters for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub density: DensityMap,
    pub segmentation: SegmentationMap,
}

pub fn generate_ground_truth(image: &AnnotatedImage, policy: &SigmaPolicy) -> Result<GroundTruth> {
    let density = make_density_map(image, policy)?;
    let segmentation = make_segmentation_map(image, &density.sigmas)?;
    Ok(GroundTruth { density, segmentation })
}
