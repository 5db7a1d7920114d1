//! Invariants checked over generated inputs.

use agregnet::annotations::{AnnotatedImage, PointAnnotation};
use agregnet::groundtruth::{compute_adaptive_sigmas, make_density_map, make_segmentation_map, SigmaPolicy};
use agregnet::localization::{detect_peaks, match_peaks};
use agregnet::metrics::{count_errors, ssim};
use agregnet::raster::Raster;
use agregnet::training::dice_coefficient;
use proptest::prelude::*;

fn image(w: u32, h: u32, pts: &[(f64, f64)]) -> AnnotatedImage {
    AnnotatedImage {
        image_path: "p.png".into(),
        width: w,
        height: h,
        points: pts.iter().map(|&(x, y)| PointAnnotation::new(x, y, "flower")).collect(),
    }
}

fn points(n: std::ops::Range<usize>, w: f64, h: f64) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..w, 0.0..h), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn density_sums_to_count(pts in points(0..60, 96.0, 80.0)) {
        let d = make_density_map(&image(96, 80, &pts), &SigmaPolicy::fruit()).unwrap();
        prop_assert!((d.count() - pts.len() as f64).abs() < 1e-4);
        prop_assert!(d.data.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn density_is_translation_equivariant(
        pts in points(1..8, 20.0, 20.0),
        dx in 0usize..12,
        dy in 0usize..12,
    ) {
        // Points stay far enough from every border that no kernel is clipped.
        let pts: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x + 40.0, y + 40.0)).collect();
        let moved: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (x + dx as f64, y + dy as f64)).collect();
        let policy = SigmaPolicy { ratio: 0.15, fallback_sigma: 3.0, min_sigma: 1.0 };
        let a = make_density_map(&image(128, 128, &pts), &policy).unwrap();
        let b = make_density_map(&image(128, 128, &moved), &policy).unwrap();
        for y in 0..116 {
            for x in 0..116 {
                prop_assert!((a.data.get(x, y) - b.data.get(x + dx, y + dy)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn sigmas_scale_with_the_layout(pts in points(2..30, 100.0, 100.0), k in 1.5f64..4.0) {
        let policy = SigmaPolicy { ratio: 0.2, fallback_sigma: 8.0, min_sigma: 1e-9 };
        let scaled: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (k * x, k * y)).collect();
        let a = compute_adaptive_sigmas(&pts, &policy);
        let b = compute_adaptive_sigmas(&scaled, &policy);
        for (s, t) in a.iter().zip(&b) {
            prop_assert!((k * s - t).abs() <= 1e-9 * t.max(1.0));
        }
    }

    #[test]
    fn segmentation_covers_every_centroid(pts in points(0..30, 64.0, 48.0)) {
        let img = image(64, 48, &pts);
        let d = make_density_map(&img, &SigmaPolicy::flower()).unwrap();
        let s = make_segmentation_map(&img, &d.sigmas).unwrap();
        for &(x, y) in &pts {
            let (px, py) = ((x.round() as usize).min(63), (y.round() as usize).min(47));
            prop_assert_eq!(s.data.get(px, py), 1);
        }
        prop_assert!(s.data.data().iter().all(|&v| v <= 1));
    }

    #[test]
    fn dice_is_symmetric_and_bounded(
        v in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..64),
    ) {
        let (p, g): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let a = dice_coefficient(&p, &g, 1e-6).unwrap();
        let b = dice_coefficient(&g, &p, 1e-6).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0 + 1e-9).contains(&a));
    }

    #[test]
    fn peaks_respect_spacing(
        vals in prop::collection::vec(0.0f32..1.0, 24 * 20),
        d in 1usize..5,
    ) {
        let r = Raster::from_vec(24, 20, vals).unwrap();
        let peaks = detect_peaks(&r, d, 0.1);
        for (i, a) in peaks.iter().enumerate() {
            prop_assert!(r.get(a.0, a.1) as f64 >= 0.1);
            for b in &peaks[i + 1..] {
                prop_assert!(a.0.abs_diff(b.0).max(a.1.abs_diff(b.1)) > d);
            }
        }
    }

    #[test]
    fn matching_ignores_prediction_order(
        gt in points(0..8, 50.0, 50.0),
        pred in points(0..8, 50.0, 50.0),
        rot in 0usize..8,
    ) {
        let base = match_peaks(&gt, &pred);
        let mut shuffled = pred.clone();
        if !shuffled.is_empty() {
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
        }
        let other = match_peaks(&gt, &shuffled);
        prop_assert!((base.total_cost() - other.total_cost()).abs() < 1e-9);
        prop_assert_eq!(base.pairs.len(), gt.len().min(pred.len()));
        prop_assert_eq!(base.unmatched_gt.len() + base.pairs.len(), gt.len());
        prop_assert_eq!(base.unmatched_pred.len() + base.pairs.len(), pred.len());
    }

    #[test]
    fn rmse_dominates_mae(
        v in prop::collection::vec((1.0f64..100.0, 0.0f64..120.0), 1..30),
    ) {
        let (g, p): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
        let e = count_errors(&g, &p).unwrap();
        prop_assert!(e.rmse + 1e-12 >= e.mae && e.mae >= 0.0);
    }

    #[test]
    fn ssim_is_symmetric(
        a in prop::collection::vec(0.0f64..1.0, 12 * 10),
        b in prop::collection::vec(0.0f64..1.0, 12 * 10),
    ) {
        let (ra, rb) = (Raster::from_vec(12, 10, a).unwrap(), Raster::from_vec(12, 10, b).unwrap());
        let x = ssim(&ra, &rb, Some(1.0)).unwrap();
        prop_assert!((x - ssim(&rb, &ra, Some(1.0)).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0 + 1e-12).contains(&x));
    }
}
