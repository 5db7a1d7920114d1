//! Losses, the Adam optimizer and the epoch loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::{AnnotatedImage, CropWindow, DatasetSplit};
use crate::error::{Error, Result};
use crate::groundtruth::{generate_ground_truth, SigmaPolicy};
use crate::localization::{count_from_density, LocalizeParams};
use crate::metrics::{aggregate, density_quality, evaluate_prediction, MetricsReport};
use crate::network::{Model, ModelOutput, OUTPUT_STRIDE};
use crate::nn::{Param, Parameters};
use crate::raster::Raster;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the segmentation (Dice) term.
    pub alpha: f64,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            dice_smooth: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.dice_smooth > 0.0 && self.dice_smooth.is_finite()) {
            return Err(Error::Config(format!("dice_smooth must be > 0, got {}", self.dice_smooth)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_per_epoch: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// `(width, height)` of the random training crops; multiples of 8.
    pub train_size: (u32, u32),
    /// `(width, height)` of the fixed validation crops.
    pub val_crop: (u32, u32),
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Random horizontal flips of training crops.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            lr_decay_per_epoch: 0.995,
            max_epochs: 200,
            batch_size: 2,
            train_size: (1024, 768),
            val_crop: (768, 576),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("lr_decay_per_epoch", self.lr_decay_per_epoch),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lr_decay_per_epoch > 1.0 {
            return Err(Error::Config(format!(
                "lr_decay_per_epoch must be <= 1, got {}",
                self.lr_decay_per_epoch
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        for (name, (w, h)) in [("train_size", self.train_size), ("val_crop", self.val_crop)] {
            let s = OUTPUT_STRIDE as u32;
            if w == 0 || h == 0 || w % s != 0 || h % s != 0 {
                return Err(Error::Config(format!(
                    "{name} {w}x{h} must be a positive multiple of {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Learning rate of every epoch, by repeated multiplication with the decay.
pub fn lr_schedule(tcfg: &TrainConfig, epochs: usize) -> Vec<f64> {
    let mut lr = tcfg.learning_rate;
    (0..epochs)
        .map(|_| {
            let cur = lr;
            lr *= tcfg.lr_decay_per_epoch;
            cur
        })
        .collect()
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{what}: {a} vs {b} values")));
    }
    Ok(())
}

/// `(2 sum(p g) + s) / (sum(p^2) + sum(g^2) + s)`.
pub fn dice_coefficient<T: Scalar>(pred: &[T], gt: &[T], smooth: f64) -> Result<f64> {
    check_len(pred.len(), gt.len(), "dice inputs differ in size")?;
    let (num, den) = dice_terms(pred, gt, smooth);
    Ok(num / den)
}

fn dice_terms<T: Scalar>(pred: &[T], gt: &[T], smooth: f64) -> (f64, f64) {
    let (mut pg, mut pp, mut gg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p.to_f64().unwrap(), g.to_f64().unwrap());
        pg += p * g;
        pp += p * p;
        gg += g * g;
    }
    (2.0 * pg + smooth, pp + gg + smooth)
}

/// Mean of squared differences.
pub fn mse_loss<T: Scalar>(pred: &[T], gt: &[T]) -> Result<f64> {
    check_len(pred.len(), gt.len(), "mse inputs differ in size")?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| (p - g).to_f64().unwrap().powi(2))
        .sum::<f64>()
        / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub density: f64,
    /// `1 - Dice`, averaged over the batch; absent without a segmentation branch.
    pub segmentation: Option<f64>,
}

/// Combined loss and its gradients with respect to the two network outputs.
/// The density term is the MSE over every pixel of the batch; the
/// segmentation term is the per-image Dice loss averaged over the batch.
pub fn loss_and_gradients<T: Scalar>(
    out: &ModelOutput<T>,
    gt_density: &Tensor<T>,
    gt_segmentation: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Tensor<T>, Option<Tensor<T>>)> {
    if !out.density.same_shape(gt_density) {
        return Err(Error::Contract(format!(
            "density prediction {:?} vs target {:?}",
            out.density.shape(),
            gt_density.shape()
        )));
    }
    let density = mse_loss(out.density.data(), gt_density.data())?;
    let n = gt_density.len() as f64;
    let scale = T::from_f64(2.0 / n);
    let mut d_density = out.density.clone();
    for (d, &g) in d_density.data_mut().iter_mut().zip(gt_density.data()) {
        *d = (*d - g) * scale;
    }
    let Some(seg) = out.segmentation.as_ref() else {
        return Ok((
            LossBreakdown {
                total: density,
                density,
                segmentation: None,
            },
            d_density,
            None,
        ));
    };
    if !seg.same_shape(gt_segmentation) {
        return Err(Error::Contract(format!(
            "segmentation prediction {:?} vs target {:?}",
            seg.shape(),
            gt_segmentation.shape()
        )));
    }
    let batch = seg.batch();
    let mut seg_loss = 0.0;
    let mut d_seg = seg.clone();
    for i in 0..batch {
        let (p, g) = (seg.item(i), gt_segmentation.item(i));
        let (num, den) = dice_terms(p, g, cfg.dice_smooth);
        seg_loss += 1.0 - num / den;
        // d(1 - num/den)/dp = -(2 g den - 2 p num) / den^2, scaled by alpha / batch.
        let k = -cfg.alpha / batch as f64 / (den * den);
        for ((d, &pv), &gv) in d_seg.item_mut(i).iter_mut().zip(p).zip(g) {
            let (pv, gv) = (pv.to_f64().unwrap(), gv.to_f64().unwrap());
            *d = T::from_f64(k * (2.0 * gv * den - 2.0 * pv * num));
        }
    }
    seg_loss /= batch as f64;
    Ok((
        LossBreakdown {
            total: density + cfg.alpha * seg_loss,
            density,
            segmentation: Some(seg_loss),
        },
        d_density,
        Some(d_seg),
    ))
}

/// `mse + alpha * (1 - dice)`, or the MSE alone without a segmentation output.
pub fn total_loss<T: Scalar>(
    out: &ModelOutput<T>,
    gt_density: &Tensor<T>,
    gt_segmentation: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    loss_and_gradients(out, gt_density, gt_segmentation, cfg).map(|(l, _, _)| l)
}

/// Adam with bias correction; moment buffers follow parameter visiting order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step<T: Scalar, M: Parameters<T>>(&mut self, model: &mut M, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |_, p: &mut Param<T>| {
            if ms.len() == k {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[k], &mut vs[k]);
            for i in 0..p.len() {
                let g = p.grad[i].to_f64().unwrap();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                p.value[i] = p.value[i] - T::from_f64(update);
            }
            k += 1;
        });
    }
}

/// One image with its supervision rasters.
#[derive(Clone, Debug)]
pub struct Sample {
    pub annotation: AnnotatedImage,
    /// `[1, 3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub density: Raster<f32>,
    pub segmentation: Raster<u8>,
    pub sigmas: Vec<f64>,
}

impl Sample {
    pub fn new(annotation: AnnotatedImage, image: Tensor<f32>, policy: &SigmaPolicy) -> Result<Self> {
        let [_, c, h, w] = image.shape();
        if c != 3 || (w, h) != (annotation.width as usize, annotation.height as usize) {
            return Err(Error::Validation(format!(
                "image {} is {w}x{h}x{c} but annotated as {}x{}x3",
                annotation.image_path.display(),
                annotation.width,
                annotation.height
            )));
        }
        let gt = generate_ground_truth(&annotation, policy)?;
        Ok(Self {
            annotation,
            image,
            density: gt.density.data,
            segmentation: gt.segmentation.data,
            sigmas: gt.density.sigmas,
        })
    }

    /// Read the image file (relative to `base`) and build its ground truth.
    pub fn load(annotation: &AnnotatedImage, base: &Path, policy: &SigmaPolicy) -> Result<Self> {
        let img = crate::imaging::load_rgb(&base.join(&annotation.image_path))?;
        Self::new(annotation.clone(), crate::imaging::to_tensor(&img), policy)
    }

    pub fn gt_count(&self) -> f64 {
        self.annotation.points.len() as f64
    }

    /// Cropped image, density and segmentation; optionally mirrored left-right.
    pub fn crop(&self, win: CropWindow, flip: bool) -> (Tensor<f32>, Vec<f32>, Vec<f32>) {
        let (x0, y0) = (win.x0 as usize, win.y0 as usize);
        let (w, h) = (win.width as usize, win.height as usize);
        let full_w = self.density.width();
        let src_x = |x: usize| if flip { x0 + w - 1 - x } else { x0 + x };
        let mut img = Tensor::zeros([1, 3, h, w]);
        for c in 0..3 {
            let plane = self.image.plane(0, c);
            let dst = img.plane_mut(0, c);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = plane[(y0 + y) * full_w + src_x(x)];
                }
            }
        }
        let mut den = Vec::with_capacity(w * h);
        let mut seg = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                den.push(self.density.get(src_x(x), y0 + y));
                seg.push(self.segmentation.get(src_x(x), y0 + y) as f32);
            }
        }
        (img, den, seg)
    }

    /// Full image trimmed to a multiple of the network stride.
    pub fn network_window(&self) -> CropWindow {
        let s = OUTPUT_STRIDE as u32;
        CropWindow::full(self.annotation.width / s * s, self.annotation.height / s * s)
    }
}

/// Largest stride-aligned window of at most `crop` that fits the image.
fn fitted(crop: (u32, u32), width: u32, height: u32) -> Result<(u32, u32)> {
    let s = OUTPUT_STRIDE as u32;
    let w = crop.0.min(width) / s * s;
    let h = crop.1.min(height) / s * s;
    if w == 0 || h == 0 {
        return Err(Error::Validation(format!(
            "image {width}x{height} is smaller than the network stride {s}"
        )));
    }
    Ok((w, h))
}

/// Predicted density for a whole image, evaluated on the stride-aligned
/// top-left window and zero-padded back to full size.
pub fn predict_density(model: &mut Model<f32>, image: &Tensor<f32>) -> Result<Raster<f32>> {
    let [_, _, h, w] = image.shape();
    let s = OUTPUT_STRIDE;
    let (hw, ww) = (h / s * s, w / s * s);
    if hw == 0 || ww == 0 {
        return Err(Error::Shape(format!("image {w}x{h} is smaller than the network stride {s}")));
    }
    let input = if (hw, ww) == (h, w) {
        image.clone()
    } else {
        let mut t = Tensor::zeros([1, 3, hw, ww]);
        for c in 0..3 {
            let (src, dst) = (image.plane(0, c), t.plane_mut(0, c));
            for y in 0..hw {
                dst[y * ww..(y + 1) * ww].copy_from_slice(&src[y * w..y * w + ww]);
            }
        }
        t
    };
    let out = model.predict(&input)?;
    let mut r = Raster::new(w, h);
    let d = out.density.plane(0, 0);
    for y in 0..hw {
        for x in 0..ww {
            r.set(x, y, d[y * ww + x]);
        }
    }
    Ok(r)
}

/// Dataset metrics of a model over whole images.
pub fn evaluate(model: &mut Model<f32>, samples: &[Sample], params: &LocalizeParams) -> Result<MetricsReport> {
    let per_image = samples
        .iter()
        .map(|s| {
            let pred = predict_density(model, &s.image)?;
            evaluate_prediction(
                s.annotation.image_path.clone(),
                &pred,
                &s.density,
                &s.annotation.coords(),
                &s.sigmas,
                params,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(per_image)
}

/// Mean ground-truth sigma over a sample set (1.0 when there are no points).
pub fn mean_sigma(samples: &[Sample]) -> f64 {
    let all: Vec<f64> = samples.iter().flat_map(|s| s.sigmas.iter().copied()).collect();
    if all.is_empty() {
        1.0
    } else {
        all.iter().sum::<f64>() / all.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_ssim: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_mae,val_ssim\n");
    for r in history {
        writeln!(s, "{},{:e},{:e},{},{}", r.epoch, r.lr, r.train_loss, r.val_mae, r.val_ssim).unwrap();
    }
    s
}

/// Fixed validation views: one seeded crop per validation sample.
pub struct Validation<'a> {
    samples: &'a [Sample],
    windows: Vec<CropWindow>,
}

impl<'a> Validation<'a> {
    pub fn new(samples: &'a [Sample], crop: (u32, u32), seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let windows = samples
            .iter()
            .map(|s| {
                let (w, h) = (s.annotation.width, s.annotation.height);
                Ok(CropWindow::random(w, h, fitted(crop, w, h)?, &mut rng))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, windows })
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean absolute count error and mean SSIM over the crops.
    pub fn evaluate(&self, model: &mut Model<f32>) -> Result<(f64, f64)> {
        let (mut mae, mut ssim) = (0.0, 0.0);
        for (s, &win) in self.samples.iter().zip(&self.windows) {
            let (img, den, _) = s.crop(win, false);
            let out = model.predict(&img)?;
            let (w, h) = (win.width as usize, win.height as usize);
            let pred = Raster::from_vec(w, h, out.density.into_vec())?;
            let gt = Raster::from_vec(w, h, den)?;
            mae += (count_from_density(&pred) - gt.total()).abs();
            ssim += density_quality(&pred, &gt)?.1;
        }
        let n = self.samples.len() as f64;
        Ok((mae / n, ssim / n))
    }
}

pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights were kept (lowest validation MAE, else the last).
    pub best_epoch: usize,
}

fn snapshot<T: Scalar, M: Parameters<T>>(model: &M) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    model.visit("", &mut |_, p| out.push(p.value.clone()));
    out
}

fn restore<T: Scalar, M: Parameters<T>>(model: &mut M, values: &[Vec<T>]) {
    let mut k = 0;
    model.visit_mut("", &mut |_, p| {
        p.value.copy_from_slice(&values[k]);
        k += 1;
    });
}

/// Train on `train` samples; validate on fixed crops of `val` samples after
/// every epoch. On return the model holds the best-validation weights.
/// `on_epoch` sees each record as it is produced.
pub fn train(
    model: &mut Model<f32>,
    train: &[Sample],
    val: &[Sample],
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    lcfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let validation = Validation::new(val, tcfg.val_crop, tcfg.seed ^ 0x5eed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut adam = Adam::new(tcfg.beta1, tcfg.beta2, tcfg.epsilon);
    let mut history = Vec::with_capacity(tcfg.max_epochs);
    let mut best: Option<(f64, usize, Vec<Vec<f32>>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for (epoch, lr) in lr_schedule(tcfg, tcfg.max_epochs).into_iter().enumerate() {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            // All crops of a batch share one size: the smallest fitted crop.
            let size = chunk
                .iter()
                .map(|&i| fitted(tcfg.train_size, train[i].annotation.width, train[i].annotation.height))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold((u32::MAX, u32::MAX), |a, s| (a.0.min(s.0), a.1.min(s.1)));
            let (mut imgs, mut dens, mut segs) = (Vec::new(), Vec::new(), Vec::new());
            for &i in chunk {
                let s = &train[i];
                let win = CropWindow::random(s.annotation.width, s.annotation.height, size, &mut rng);
                let flip = tcfg.augment && rand::Rng::gen_bool(&mut rng, 0.5);
                let (img, den, seg) = s.crop(win, flip);
                imgs.push(img);
                dens.extend(den);
                segs.extend(seg);
            }
            let (w, h) = (size.0 as usize, size.1 as usize);
            let x = Tensor::stack(&imgs);
            let gt_den = Tensor::from_vec([chunk.len(), 1, h, w], dens);
            let gt_seg = Tensor::from_vec([chunk.len(), 1, h, w], segs);
            model.zero_grad();
            let out = model.forward(&x, true)?;
            let (loss, d_den, d_seg) = loss_and_gradients(&out, &gt_den, &gt_seg, lcfg)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    loss: loss.total,
                    density: loss.density,
                    segmentation: loss.segmentation.unwrap_or(0.0),
                });
            }
            model.backward(&d_den, d_seg.as_ref());
            adam.step(model, lr);
            loss_sum += loss.total;
            batches += 1;
        }
        let (val_mae, val_ssim) = if validation.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            validation.evaluate(model)?
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val_mae,
            val_ssim,
        };
        log::info!(
            "epoch {epoch}: lr={lr:.3e} loss={:.4e} val_mae={val_mae:.3} val_ssim={val_ssim:.3}",
            record.train_loss
        );
        on_epoch(&record);
        history.push(record);
        let improves = match &best {
            _ if validation.is_empty() => true,
            None => true,
            Some((b, _, _)) => val_mae < *b,
        };
        if improves {
            best = Some((val_mae, epoch, snapshot(model)));
        }
    }
    let (_, best_epoch, weights) = best.expect("at least one epoch ran");
    restore(model, &weights);
    Ok(TrainOutcome { history, best_epoch })
}

/// Load train and test images of a split and train on them.
pub fn train_split(
    model: &mut Model<f32>,
    split: &DatasetSplit,
    base: &Path,
    policy: &SigmaPolicy,
    tcfg: &TrainConfig,
    lcfg: &LossConfig,
) -> Result<TrainOutcome> {
    let load = |imgs: &[AnnotatedImage]| {
        imgs.iter()
            .map(|a| Sample::load(a, base, policy))
            .collect::<Result<Vec<_>>>()
    };
    let (tr, te) = (load(&split.train)?, load(&split.test)?);
    let tcfg = TrainConfig {
        val_crop: split.validation_crop,
        ..tcfg.clone()
    };
    train(model, &tr, &te, &tcfg, lcfg, |_| {})
}
