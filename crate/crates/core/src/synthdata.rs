//! Deterministic synthetic orchard-like scenes: bright annotated disks on a
//! textured canopy, plus dim blurred look-alikes and occluding bars that are
//! not annotated.

use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{save_annotations, AnnotatedImage, AnnotationSet, PointAnnotation};
use crate::error::{Error, Result};

/// Placement attempts per object before giving up.
const MAX_ATTEMPTS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
    /// Inclusive range of annotated objects per scene.
    pub n_objects: (usize, usize),
    /// Range of object radii in pixels.
    pub object_radius: (f64, f64),
    pub n_background_objects: (usize, usize),
    pub n_occluders: (usize, usize),
    /// Relative per-object color perturbation.
    pub color_jitter: f64,
    /// Brightness factor of background objects.
    pub background_dim: f64,
    /// Box-blur radius of background objects in pixels.
    pub background_blur: usize,
    pub label: String,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: (256, 192),
            n_objects: (10, 30),
            object_radius: (4.0, 7.0),
            n_background_objects: (4, 12),
            n_occluders: (0, 3),
            color_jitter: 0.1,
            background_dim: 0.5,
            background_blur: 2,
            label: "flower".into(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        let (w, h) = self.image_size;
        if w == 0 || h == 0 {
            return bad(format!("image_size must be positive, got {w}x{h}"));
        }
        for (name, (lo, hi)) in [
            ("n_objects", self.n_objects),
            ("n_background_objects", self.n_background_objects),
            ("n_occluders", self.n_occluders),
        ] {
            if lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        let (r0, r1) = self.object_radius;
        if !(r0 >= 2.0 && r0 <= r1 && r1.is_finite()) {
            return bad(format!("object_radius range [{r0}, {r1}] must satisfy 2 <= lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.color_jitter) || !(0.0..=1.0).contains(&self.background_dim) {
            return bad("color_jitter and background_dim must lie in [0, 1]".into());
        }
        if self.label.is_empty() {
            return bad("label must be non-empty".into());
        }
        Ok(())
    }
}

fn range_usize(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

fn range_f64(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let px = &mut self.rgb[y * self.w + x];
        for c in 0..3 {
            px[c] = px[c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    /// Shaded disk: brighter core, yellow center, antialiased rim. Returns the
    /// color layer and coverage for compositing.
    fn disk(&self, cx: f64, cy: f64, r: f64, petal: [f64; 3], layer: &mut [[f64; 4]]) {
        let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
        let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + r + 1.0).ceil() as usize).min(self.w - 1);
        let y1 = ((cy + r + 1.0).ceil() as usize).min(self.h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = (x as f64 - cx).hypot(y as f64 - cy);
                let cover = (r + 0.5 - d).clamp(0.0, 1.0);
                if cover <= 0.0 {
                    continue;
                }
                let t = d / r;
                let shade = 1.0 - 0.3 * t * t;
                let center = (r / 3.0 + 0.5 - d).clamp(0.0, 1.0);
                let mut c = [0.0; 3];
                for k in 0..3 {
                    let yellow = [0.95, 0.8, 0.15][k];
                    c[k] = (petal[k] * shade) * (1.0 - center) + yellow * center;
                }
                let px = &mut layer[y * self.w + x];
                let a = cover.max(px[3]);
                *px = [c[0], c[1], c[2], a];
            }
        }
    }

    fn composite(&mut self, layer: &[[f64; 4]]) {
        for (i, px) in layer.iter().enumerate() {
            if px[3] > 0.0 {
                let (x, y) = (i % self.w, i / self.w);
                self.blend(x, y, [px[0], px[1], px[2]], px[3]);
            }
        }
    }

    fn to_image(&self) -> RgbImage {
        let mut img = RgbImage::new(self.w as u32, self.h as u32);
        for (i, px) in self.rgb.iter().enumerate() {
            let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel((i % self.w) as u32, (i / self.w) as u32, Rgb([q(px[0]), q(px[1]), q(px[2])]));
        }
        img
    }
}

/// Separable box blur of premultiplied RGBA.
fn box_blur(layer: &mut [[f64; 4]], w: usize, h: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let premul: Vec<[f64; 4]> = layer
        .iter()
        .map(|p| [p[0] * p[3], p[1] * p[3], p[2] * p[3], p[3]])
        .collect();
    let pass = |src: &[[f64; 4]], horizontal: bool| -> Vec<[f64; 4]> {
        let mut out = vec![[0.0; 4]; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 4];
                let mut n = 0.0;
                let (pos, len) = if horizontal { (x, w) } else { (y, h) };
                for q in pos.saturating_sub(radius)..=(pos + radius).min(len - 1) {
                    let idx = if horizontal { y * w + q } else { q * w + x };
                    for k in 0..4 {
                        acc[k] += src[idx][k];
                    }
                    n += 1.0;
                }
                out[y * w + x] = acc.map(|v| v / n);
            }
        }
        out
    };
    let blurred = pass(&pass(&premul, true), false);
    for (dst, p) in layer.iter_mut().zip(blurred) {
        *dst = if p[3] > 1e-12 {
            [p[0] / p[3], p[1] / p[3], p[2] / p[3], p[3]]
        } else {
            [0.0; 4]
        };
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    let scale = 1.0 + range_f64(rng, (-amount, amount));
    base.map(|c| (c * scale + range_f64(rng, (-amount, amount)) * 0.2).clamp(0.0, 1.0))
}

const PETAL: [f64; 3] = [0.96, 0.86, 0.9];
const CANOPY: [f64; 3] = [0.16, 0.36, 0.15];
const BRANCH: [f64; 3] = [0.36, 0.25, 0.13];

/// Render scene `index` of the configured family.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<(RgbImage, AnnotatedImage)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (w, h) = (cfg.image_size.0 as usize, cfg.image_size.1 as usize);

    // Low-frequency canopy texture.
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                range_f64(&mut rng, (0.01, 0.06)),
                range_f64(&mut rng, (0.01, 0.06)),
                range_f64(&mut rng, (0.0, 2.0 * PI)),
                range_f64(&mut rng, (0.03, 0.08)),
            )
        })
        .collect();
    let base = jitter(&mut rng, CANOPY, cfg.color_jitter);
    let mut canvas = Canvas {
        w,
        h,
        rgb: vec![[0.0; 3]; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 * 2.0 * PI + fy * y as f64 * 2.0 * PI + ph).sin())
                .sum();
            let noise = range_f64(&mut rng, (-0.02, 0.02));
            canvas.rgb[y * w + x] = base.map(|c| c + t + noise);
        }
    }

    // Background look-alikes: dimmed and blurred.
    let mut layer = vec![[0.0; 4]; w * h];
    for _ in 0..range_usize(&mut rng, cfg.n_background_objects) {
        let r = range_f64(&mut rng, cfg.object_radius) * 0.8;
        let cx = range_f64(&mut rng, (0.0, w as f64));
        let cy = range_f64(&mut rng, (0.0, h as f64));
        let petal = jitter(&mut rng, PETAL, cfg.color_jitter).map(|c| c * cfg.background_dim);
        canvas.disk(cx, cy, r, petal, &mut layer);
    }
    box_blur(&mut layer, w, h, cfg.background_blur);
    canvas.composite(&layer);

    // Foreground objects, non-overlapping, centers kept half a radius inside.
    let n = range_usize(&mut rng, cfg.n_objects);
    let mut placed: Vec<(f64, f64, f64)> = Vec::with_capacity(n);
    for k in 0..n {
        let r = range_f64(&mut rng, cfg.object_radius);
        let margin = (r / 2.0).min(w as f64 / 2.0 - 0.5).min(h as f64 / 2.0 - 0.5).max(0.0);
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let cx = range_f64(&mut rng, (margin, w as f64 - margin));
            let cy = range_f64(&mut rng, (margin, h as f64 - margin));
            if placed.iter().all(|&(px, py, pr)| (cx - px).hypot(cy - py) >= r + pr + 1.0) {
                found = Some((cx, cy));
                break;
            }
        }
        let Some((cx, cy)) = found else {
            return Err(Error::Generation(format!(
                "scene {index}: could not place object {k} of {n} after {MAX_ATTEMPTS} attempts"
            )));
        };
        placed.push((cx, cy, r));
    }
    let mut layer = vec![[0.0; 4]; w * h];
    for &(cx, cy, r) in &placed {
        let petal = jitter(&mut rng, PETAL, cfg.color_jitter);
        canvas.disk(cx, cy, r, petal, &mut layer);
    }
    canvas.composite(&layer);

    // Branch-like bars crossing some of the objects.
    for _ in 0..range_usize(&mut rng, cfg.n_occluders) {
        let (ax, ay) = if placed.is_empty() {
            (range_f64(&mut rng, (0.0, w as f64)), range_f64(&mut rng, (0.0, h as f64)))
        } else {
            let (px, py, pr) = placed[rng.gen_range(0..placed.len())];
            (px + range_f64(&mut rng, (-pr, pr)) * 0.6, py + range_f64(&mut rng, (-pr, pr)) * 0.6)
        };
        let angle = range_f64(&mut rng, (0.0, PI));
        let half_len = range_f64(&mut rng, (15.0, 45.0));
        let half_width = range_f64(&mut rng, (0.8, 1.6));
        let color = jitter(&mut rng, BRANCH, cfg.color_jitter);
        let (dx, dy) = (angle.cos(), angle.sin());
        let reach = half_len + half_width + 1.0;
        let x0 = (ax - reach).floor().max(0.0) as usize;
        let y0 = (ay - reach).floor().max(0.0) as usize;
        let x1 = ((ax + reach).ceil() as usize).min(w - 1);
        let y1 = ((ay + reach).ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (rx, ry) = (x as f64 - ax, y as f64 - ay);
                let along = rx * dx + ry * dy;
                let across = (-rx * dy + ry * dx).abs();
                if along.abs() <= half_len {
                    let cover = (half_width + 0.5 - across).clamp(0.0, 1.0);
                    if cover > 0.0 {
                        canvas.blend(x, y, color, cover);
                    }
                }
            }
        }
    }

    let annotation = AnnotatedImage {
        image_path: format!("img_{index:04}.png").into(),
        width: cfg.image_size.0,
        height: cfg.image_size.1,
        points: placed
            .iter()
            .map(|&(x, y, _)| PointAnnotation::new(x, y, cfg.label.clone()))
            .collect(),
    };
    Ok((canvas.to_image(), annotation))
}

/// Write scenes `0..n` as PNGs plus `annotations.json` into `out_dir`.
pub fn generate_dataset(cfg: &SceneConfig, n: usize, out_dir: &Path) -> Result<AnnotationSet> {
    cfg.validate()?;
    crate::io::create_dir(out_dir)?;
    let images = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let (img, ann) = generate_scene(cfg, i)?;
            crate::imaging::save_rgb(&out_dir.join(&ann.image_path), &img)?;
            Ok(ann)
        })
        .collect::<Result<Vec<_>>>()?;
    let set = AnnotationSet::new(vec![cfg.label.clone()], images);
    save_annotations(&out_dir.join("annotations.json"), &set)?;
    Ok(set)
}
