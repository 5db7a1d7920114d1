//! Density-map quality (SSIM, PSNR), counting errors (MAE, RMSE, pMAE) and
//! threshold-swept localization precision/recall.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localization::{localize, LocalizeParams, MatchResult};
use crate::raster::Raster;

/// SSIM window side length (uniform window).
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// PSNR reported for identical rasters, and the upper clamp otherwise.
pub const PSNR_CAP: f64 = 100.0;

fn check_same<P: Copy + Default>(a: &Raster<P>, b: &Raster<P>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Metric(format!(
            "raster shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Summed-area table with a zero first row and column.
struct Integral {
    w1: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(w: usize, h: usize, value: impl Fn(usize) -> f64) -> Self {
        let w1 = w + 1;
        let mut sums = vec![0.0; w1 * (h + 1)];
        for y in 0..h {
            let mut run = 0.0;
            for x in 0..w {
                run += value(y * w + x);
                sums[(y + 1) * w1 + x + 1] = sums[y * w1 + x + 1] + run;
            }
        }
        Self { w1, sums }
    }

    fn window(&self, x: usize, y: usize, k: usize) -> f64 {
        let s = &self.sums;
        let (x1, y1) = (x + k, y + k);
        s[y1 * self.w1 + x1] - s[y * self.w1 + x1] - s[y1 * self.w1 + x] + s[y * self.w1 + x]
    }
}

fn inferred_range(a: &[f64], b: &[f64]) -> f64 {
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

/// Mean windowed SSIM over all fully contained 7x7 windows (smaller rasters
/// use a window of their shorter side). Local variances use the sample
/// (N - 1) normalization. `data_range` defaults to the joint value range.
pub fn ssim<P: Copy + Default + Into<f64>>(a: &Raster<P>, b: &Raster<P>, data_range: Option<f64>) -> Result<f64> {
    check_same(a, b)?;
    let (w, h) = a.dims();
    let k = SSIM_WINDOW.min(w).min(h);
    if k < 2 {
        return Err(Error::Metric(format!("raster {w}x{h} is too small for SSIM")));
    }
    let av = a.to_f64().into_vec();
    let bv = b.to_f64().into_vec();
    let l = match data_range {
        Some(r) if r > 0.0 && r.is_finite() => r,
        Some(r) => return Err(Error::Metric(format!("data_range must be positive, got {r}"))),
        None => inferred_range(&av, &bv),
    };
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let sa = Integral::new(w, h, |i| av[i]);
    let sb = Integral::new(w, h, |i| bv[i]);
    let saa = Integral::new(w, h, |i| av[i] * av[i]);
    let sbb = Integral::new(w, h, |i| bv[i] * bv[i]);
    let sab = Integral::new(w, h, |i| av[i] * bv[i]);
    let n = (k * k) as f64;
    let cov_norm = n / (n - 1.0);
    let mut total = 0.0;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let ma = sa.window(x, y, k) / n;
            let mb = sb.window(x, y, k) / n;
            let va = cov_norm * (saa.window(x, y, k) / n - ma * ma);
            let vb = cov_norm * (sbb.window(x, y, k) / n - mb * mb);
            let cab = cov_norm * (sab.window(x, y, k) / n - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / ((w - k + 1) * (h - k + 1)) as f64)
}

pub fn mse<P: Copy + Default + Into<f64>>(a: &Raster<P>, b: &Raster<P>) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.into() - y.into();
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `10 log10(data_range^2 / mse)`, clamped to [`PSNR_CAP`].
pub fn psnr<P: Copy + Default + Into<f64>>(a: &Raster<P>, b: &Raster<P>, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::Metric(format!("data_range must be positive, got {data_range}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountErrors {
    pub mae: f64,
    pub rmse: f64,
    /// MAE as a percentage of the mean ground-truth count.
    pub pmae: f64,
}

pub fn count_errors(gt_counts: &[f64], pred_counts: &[f64]) -> Result<CountErrors> {
    if gt_counts.len() != pred_counts.len() {
        return Err(Error::Metric(format!(
            "count lists differ in length: {} vs {}",
            gt_counts.len(),
            pred_counts.len()
        )));
    }
    if gt_counts.is_empty() {
        return Err(Error::Metric("count lists are empty".into()));
    }
    let n = gt_counts.len() as f64;
    let (abs, sq) = gt_counts
        .iter()
        .zip(pred_counts)
        .fold((0.0, 0.0), |(a, s), (&g, &p)| (a + (g - p).abs(), s + (g - p) * (g - p)));
    let mae = abs / n;
    let rmse = (sq / n).sqrt();
    let mean_gt = gt_counts.iter().sum::<f64>() / n;
    if mean_gt == 0.0 {
        return Err(Error::Metric("pMAE is undefined when the mean ground-truth count is 0".into()));
    }
    Ok(CountErrors {
        mae,
        rmse,
        pmae: 100.0 * mae / mean_gt,
    })
}

/// Integer distance thresholds `ceil(s) ..= floor(2.2 s)` for the mean
/// ground-truth sigma `s`; a single `ceil(s)` when that range is empty.
/// An empty sigma list gives `[1]`.
pub fn threshold_grid(sigmas: &[f64]) -> Vec<f64> {
    if sigmas.is_empty() {
        return vec![1.0];
    }
    let mean = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
    let lo = mean.ceil();
    let hi = (2.2 * mean).floor();
    if hi < lo {
        return vec![lo];
    }
    (lo as i64..=hi as i64).map(|t| t as f64).collect()
}

/// Precision and recall of a matching at one distance threshold.
pub fn precision_recall(m: &MatchResult, threshold: f64) -> (f64, f64) {
    let n_gt = m.pairs.len() + m.unmatched_gt.len();
    let n_pred = m.pairs.len() + m.unmatched_pred.len();
    let tp = m.pairs.iter().filter(|p| p.distance <= threshold).count() as f64;
    let precision = if n_pred == 0 { 1.0 } else { tp / n_pred as f64 };
    let recall = if n_gt == 0 { 1.0 } else { tp / n_gt as f64 };
    (precision, recall)
}

/// Mean precision and recall over `thresholds`.
pub fn ap_ar(m: &MatchResult, thresholds: &[f64]) -> Result<(f64, f64)> {
    if thresholds.is_empty() {
        return Err(Error::Metric("threshold grid is empty".into()));
    }
    let (p, r) = thresholds.iter().fold((0.0, 0.0), |(ps, rs), &t| {
        let (p, r) = precision_recall(m, t);
        (ps + p, rs + r)
    });
    let k = thresholds.len() as f64;
    Ok((p / k, r / k))
}

/// AP/AR over the per-image grid derived from the ground-truth sigmas.
pub fn ap_ar_sweep(m: &MatchResult, sigmas: &[f64]) -> Result<(f64, f64)> {
    ap_ar(m, &threshold_grid(sigmas))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub file: PathBuf,
    pub gt_count: f64,
    pub pred_count: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ap: f64,
    pub ar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub rmse: f64,
    pub pmae: f64,
    pub map: f64,
    pub mar: f64,
    pub per_image: Vec<ImageMetrics>,
}

/// PSNR and SSIM of a predicted density map against its ground truth.
/// The data range is the ground-truth maximum; an all-zero ground truth
/// falls back to the largest predicted magnitude.
pub fn density_quality(pred: &Raster<f32>, gt: &Raster<f32>) -> Result<(f64, f64)> {
    let mut range = gt.max_value();
    if !(range > 0.0) {
        range = pred.data().iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    }
    if !(range > 0.0) {
        return Ok((PSNR_CAP, 1.0));
    }
    Ok((psnr(gt, pred, range)?, ssim(gt, pred, Some(range))?))
}

/// Per-image record for one predicted density map.
pub fn evaluate_prediction(
    file: PathBuf,
    pred: &Raster<f32>,
    gt: &Raster<f32>,
    gt_points: &[(f64, f64)],
    gt_sigmas: &[f64],
    params: &LocalizeParams,
) -> Result<ImageMetrics> {
    let (psnr, ssim) = density_quality(pred, gt)?;
    let loc = localize(pred, gt_points, params);
    let (ap, ar) = ap_ar_sweep(&loc.matching, gt_sigmas)?;
    Ok(ImageMetrics {
        file,
        gt_count: gt_points.len() as f64,
        pred_count: loc.count,
        psnr,
        ssim,
        ap,
        ar,
    })
}

/// Average per-image records into a dataset report.
pub fn aggregate(per_image: Vec<ImageMetrics>) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::Metric("no images to aggregate".into()));
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let gt: Vec<f64> = per_image.iter().map(|m| m.gt_count).collect();
    let pred: Vec<f64> = per_image.iter().map(|m| m.pred_count).collect();
    let errors = count_errors(&gt, &pred)?;
    Ok(MetricsReport {
        psnr: mean(|m| m.psnr),
        ssim: mean(|m| m.ssim),
        mae: errors.mae,
        rmse: errors.rmse,
        pmae: errors.pmae,
        map: mean(|m| m.ap),
        mar: mean(|m| m.ar),
        per_image,
    })
}
