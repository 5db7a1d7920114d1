//! Acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so every verdict is printed even when
//! output capture would hide it. Exits non-zero if any criterion fails.
//! Set `AGREGNET_ACCEPTANCE_QUICK=1` to skip the training benchmarks (7-9).

use std::time::{Duration, Instant};

use agregnet::annotations::{split_dataset, AnnotatedImage, PointAnnotation};
use agregnet::groundtruth::{compute_adaptive_sigmas, make_density_map, make_segmentation_map, SigmaPolicy};
use agregnet::imaging::to_tensor;
use agregnet::localization::{match_peaks, LocalizeParams};
use agregnet::metrics::{count_errors, evaluate_prediction, psnr, ssim, MetricsReport, SSIM_K1, SSIM_K2, SSIM_WINDOW};
use agregnet::network::{Model, NetworkConfig};
use agregnet::nn::Parameters;
use agregnet::raster::Raster;
use agregnet::synthdata::{generate_scene, SceneConfig};
use agregnet::tensor::Tensor;
use agregnet::training::{
    evaluate, loss_and_gradients, lr_schedule, mean_sigma, total_loss, train, Adam, EpochRecord, LossConfig, Sample,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<(bool, String), String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn annotated(w: u32, h: u32, pts: &[(f64, f64)]) -> AnnotatedImage {
    AnnotatedImage {
        image_path: "a.png".into(),
        width: w,
        height: h,
        points: pts.iter().map(|&(x, y)| PointAnnotation::new(x, y, "flower")).collect(),
    }
}

fn unit_mass() -> Verdict {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (w, h) = (r.gen_range(64..=512u32), r.gen_range(64..=384u32));
        let n = r.gen_range(1..=200usize);
        let pts: Vec<(f64, f64)> = (0..n)
            .map(|_| (r.gen_range(0.0..w as f64), r.gen_range(0.0..h as f64)))
            .collect();
        let d = make_density_map(&annotated(w, h, &pts), &SigmaPolicy::flower()).map_err(|e| e.to_string())?;
        worst = worst.max((d.count() - n as f64).abs());
    }
    let t = start.elapsed();
    Ok((
        worst <= 1e-3 && t < Duration::from_secs(30),
        format!("max |sum - count| = {worst:.2e} over 200 images in {t:.1?}"),
    ))
}

fn brute_min_cost(gt: &[(f64, f64)], pred: &[(f64, f64)]) -> f64 {
    // Assign each gt (in order) to a distinct pred, or leave it out when gt
    // outnumbers pred; summation follows gt order.
    fn rec(i: usize, gt: &[(f64, f64)], pred: &[(f64, f64)], used: &mut [bool], left: usize, acc: f64, best: &mut f64) {
        let remaining_pred = used.iter().filter(|u| !**u).count();
        let need = gt.len().min(pred.len());
        if i == gt.len() {
            if left == need {
                *best = best.min(acc);
            }
            return;
        }
        if need - left > gt.len() - i {
            return;
        }
        if remaining_pred > 0 {
            for j in 0..pred.len() {
                if !used[j] {
                    used[j] = true;
                    let d = (gt[i].0 - pred[j].0).hypot(gt[i].1 - pred[j].1);
                    rec(i + 1, gt, pred, used, left + 1, acc + d, best);
                    used[j] = false;
                }
            }
        }
        rec(i + 1, gt, pred, used, left, acc, best);
    }
    let mut best = f64::INFINITY;
    rec(0, gt, pred, &mut vec![false; pred.len()], 0, 0.0, &mut best);
    if best.is_infinite() {
        0.0
    } else {
        best
    }
}

fn matching_oracle() -> Verdict {
    let start = Instant::now();
    let mut r = rng(2);
    let mut mismatches = 0;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.gen_range(0..=7);
        let m = r.gen_range(0..=7);
        let mut pts = |k| -> Vec<(f64, f64)> { (0..k).map(|_| (r.gen_range(0.0..50.0), r.gen_range(0.0..50.0))).collect() };
        let (gt, pred) = (pts(n), pts(m));
        let got = match_peaks(&gt, &pred);
        let want = brute_min_cost(&gt, &pred);
        if got.total_cost() != want || got.pairs.len() != n.min(m) {
            mismatches += 1;
            worst = worst.max((got.total_cost() - want).abs());
        }
    }
    let t = start.elapsed();
    Ok((
        mismatches == 0 && t < Duration::from_secs(30),
        format!("{mismatches} of 1000 instances differ from brute force (max gap {worst:.1e}) in {t:.1?}"),
    ))
}

/// Direct windowed SSIM: explicit loops, two-pass moments.
fn ssim_reference(a: &Raster<f64>, b: &Raster<f64>, range: f64) -> f64 {
    let (w, h) = a.dims();
    let k = SSIM_WINDOW.min(w).min(h);
    let (c1, c2) = ((SSIM_K1 * range).powi(2), (SSIM_K2 * range).powi(2));
    let n = (k * k) as f64;
    let mut sum = 0.0;
    let mut windows = 0;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let cells: Vec<(f64, f64)> = (0..k * k).map(|i| (a.get(x0 + i % k, y0 + i / k), b.get(x0 + i % k, y0 + i / k))).collect();
            let ma = cells.iter().map(|c| c.0).sum::<f64>() / n;
            let mb = cells.iter().map(|c| c.1).sum::<f64>() / n;
            let va = cells.iter().map(|c| (c.0 - ma).powi(2)).sum::<f64>() / (n - 1.0);
            let vb = cells.iter().map(|c| (c.1 - mb).powi(2)).sum::<f64>() / (n - 1.0);
            let cov = cells.iter().map(|c| (c.0 - ma) * (c.1 - mb)).sum::<f64>() / (n - 1.0);
            sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            windows += 1;
        }
    }
    sum / windows as f64
}

fn metric_oracles() -> Verdict {
    let mut r = rng(3);
    let mut count_gap = 0.0f64;
    for _ in 0..100 {
        let n = r.gen_range(1..40);
        let gt: Vec<f64> = (0..n).map(|_| r.gen_range(1.0..200.0f64).round()).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g + r.gen_range(-20.0..20.0)).collect();
        let e = count_errors(&gt, &pred).map_err(|e| e.to_string())?;
        let mae = gt.iter().zip(&pred).map(|(g, p)| (p - g).abs()).sum::<f64>() / n as f64;
        let rmse = (gt.iter().zip(&pred).map(|(g, p)| (p - g).powi(2)).sum::<f64>() / n as f64).sqrt();
        count_gap = count_gap.max((e.mae - mae).abs()).max((e.rmse - rmse).abs());
    }
    let mut psnr_gap = 0.0f64;
    let mut ssim_gap = 0.0f64;
    for _ in 0..50 {
        let (w, h) = (r.gen_range(8..48), r.gen_range(8..40));
        let a: Vec<f64> = (0..w * h).map(|_| r.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|v| v * 0.8 + r.gen_range(0.0..0.3)).collect();
        let (ra, rb) = (Raster::from_vec(w, h, a.clone()).unwrap(), Raster::from_vec(w, h, b.clone()).unwrap());
        let mse = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (w * h) as f64;
        let direct = 10.0 * (1.0 / mse).log10();
        psnr_gap = psnr_gap.max((psnr(&ra, &rb, 1.0).map_err(|e| e.to_string())? - direct).abs());
        let ours = ssim(&ra, &rb, Some(1.0)).map_err(|e| e.to_string())?;
        ssim_gap = ssim_gap.max((ours - ssim_reference(&ra, &rb, 1.0)).abs());
    }
    Ok((
        count_gap <= 1e-9 && psnr_gap <= 1e-9 && ssim_gap <= 1e-4,
        format!("MAE/RMSE gap {count_gap:.1e}, PSNR gap {psnr_gap:.1e}, SSIM gap {ssim_gap:.1e} (50 pairs)"),
    ))
}

fn self_localization() -> Verdict {
    let cfg = SceneConfig::default();
    let policy = SigmaPolicy::flower();
    let anns: Vec<AnnotatedImage> = (0..100)
        .map(|i| generate_scene(&cfg, i).map(|(_, a)| a))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let all: Vec<f64> = anns.iter().flat_map(|a| compute_adaptive_sigmas(&a.coords(), &policy)).collect();
    let params = LocalizeParams::for_sigma(all.iter().sum::<f64>() / all.len() as f64);
    let (mut ap, mut ar, mut far) = (0.0, 0.0, 0usize);
    for a in &anns {
        let d = make_density_map(a, &policy).map_err(|e| e.to_string())?;
        let m = evaluate_prediction(a.image_path.clone(), &d.data, &d.data, &a.coords(), &d.sigmas, &params)
            .map_err(|e| e.to_string())?;
        ap += m.ap;
        ar += m.ar;
        let loc = agregnet::localization::localize(&d.data, &a.coords(), &params);
        far += loc.matching.pairs.iter().filter(|p| p.distance > 1.0).count() + loc.matching.unmatched_gt.len();
    }
    let (map, mar) = (ap / 100.0, ar / 100.0);
    Ok((
        map == 1.0 && mar == 1.0 && far == 0,
        format!("mAP = {map}, mAR = {mar}, {far} ground-truth points not matched within 1 px"),
    ))
}

fn gradient_check() -> Verdict {
    let cfg = NetworkConfig::toy();
    let mut model = Model::<f64>::new(&cfg, 11).map_err(|e| e.to_string())?;
    let mut r = rng(5);
    let x = Tensor::from_vec([1, 3, 16, 16], (0..3 * 256).map(|_| r.gen_range(0.0..1.0)).collect());
    let ann = annotated(16, 16, &[(4.0, 5.0), (11.3, 9.6), (6.5, 12.2)]);
    let d = make_density_map(&ann, &SigmaPolicy::flower()).map_err(|e| e.to_string())?;
    let s = make_segmentation_map(&ann, &d.sigmas).map_err(|e| e.to_string())?;
    let gd = Tensor::from_vec([1, 1, 16, 16], d.data.data().iter().map(|&v| v as f64).collect());
    let gs = Tensor::from_vec([1, 1, 16, 16], s.data.data().iter().map(|&v| v as f64).collect());
    let lcfg = LossConfig::default();

    model.zero_grad();
    let out = model.forward(&x, true).map_err(|e| e.to_string())?;
    let (_, dd, ds) = loss_and_gradients(&out, &gd, &gs, &lcfg).map_err(|e| e.to_string())?;
    model.backward(&dd, ds.as_ref());
    let mut analytic = Vec::new();
    model.visit("", &mut |_, p| analytic.extend_from_slice(&p.grad));

    let total = analytic.len();
    let picks: Vec<usize> = (0..64).map(|_| r.gen_range(0..total)).collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    let loss_at = |model: &mut Model<f64>, k: usize, delta: f64| -> Result<f64, String> {
        let mut idx = 0;
        model.visit_mut("", &mut |_, p| {
            if (idx..idx + p.value.len()).contains(&k) {
                p.value[k - idx] += delta;
            }
            idx += p.value.len();
        });
        let out = model.forward(&x, true).map_err(|e| e.to_string())?;
        let l = total_loss(&out, &gd, &gs, &lcfg).map_err(|e| e.to_string())?.total;
        let mut idx = 0;
        model.visit_mut("", &mut |_, p| {
            if (idx..idx + p.value.len()).contains(&k) {
                p.value[k - idx] -= delta;
            }
            idx += p.value.len();
        });
        Ok(l)
    };
    for &k in &picks {
        let numeric = (loss_at(&mut model, k, h)? - loss_at(&mut model, k, -h)?) / (2.0 * h);
        let a = analytic[k];
        let scale = a.abs().max(numeric.abs());
        let err = if scale > 1e-10 { (a - numeric).abs() / scale } else { (a - numeric).abs() / 1e-10 };
        worst = worst.max(err);
    }
    Ok((
        worst <= 1e-3,
        format!("max relative error {worst:.2e} over {} sampled parameters of {total}", picks.len()),
    ))
}

fn shape_contract() -> Verdict {
    let cfg = NetworkConfig::default();
    let mut model = Model::<f32>::new(&cfg, 0).map_err(|e| e.to_string())?;
    let n = model.trainable_parameters();
    let out = model.predict(&Tensor::zeros([1, 3, 768, 1024])).map_err(|e| e.to_string())?;
    let heads_ok = out.density.shape() == [1, 1, 768, 1024]
        && out.segmentation.as_ref().map(|s| s.shape()) == Some([1, 1, 768, 1024]);
    drop(model);

    let mut r = rng(6);
    let x = Tensor::from_vec([1, 3, 64, 64], (0..3 * 64 * 64).map(|_| r.gen_range(0.0..1.0f32)).collect());
    let gd = Tensor::full([1, 1, 64, 64], 1e-3f32);
    let gs = Tensor::from_vec([1, 1, 64, 64], (0..64 * 64).map(|i| (i % 7 == 0) as u8 as f32).collect());
    let mut trained = Vec::new();
    for v in cfg.ablation_variants() {
        let mut m = Model::<f32>::new(&v, 0).map_err(|e| e.to_string())?;
        let before = m.num_params();
        m.zero_grad();
        let out = m.forward(&x, true).map_err(|e| e.to_string())?;
        let (loss, dd, ds) = loss_and_gradients(&out, &gd, &gs, &LossConfig::default()).map_err(|e| e.to_string())?;
        m.backward(&dd, ds.as_ref());
        Adam::new(0.9, 0.999, 1e-8).step(&mut m, 4e-4);
        let after = m.predict(&x).map_err(|e| e.to_string())?;
        if loss.total.is_finite() && after.density.is_finite() && before > 0 {
            trained.push(v.variant_name());
        }
    }
    let ok = (6_600_000..=12_300_000).contains(&n) && heads_ok && trained.len() == 4;
    Ok((
        ok,
        format!(
            "{n} parameters, heads at 768x1024: {heads_ok}, one step trained: {}",
            trained.join(", ")
        ),
    ))
}

struct BenchRun {
    report: MetricsReport,
    history: Vec<EpochRecord>,
    time: Duration,
}

struct Bench {
    train: Vec<Sample>,
    test: Vec<Sample>,
}

impl Bench {
    fn new() -> Result<Self, String> {
        let cfg = SceneConfig::default();
        let policy = SigmaPolicy::flower();
        let samples = (0..80)
            .map(|i| {
                let (img, ann) = generate_scene(&cfg, i)?;
                Sample::new(ann, to_tensor(&img), &policy)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let anns: Vec<AnnotatedImage> = samples.iter().map(|s| s.annotation.clone()).collect();
        let split = split_dataset(&anns, 0.8, 0).map_err(|e| e.to_string())?;
        let pick = |list: &[AnnotatedImage]| -> Vec<Sample> {
            list.iter()
                .map(|a| samples.iter().find(|s| s.annotation.image_path == a.image_path).unwrap().clone())
                .collect()
        };
        Ok(Self {
            train: pick(&split.train),
            test: pick(&split.test),
        })
    }

    fn run(&self, seed: u64, seg: bool) -> Result<BenchRun, String> {
        let net = NetworkConfig::toy().with_ablation(true, seg);
        let tcfg = TrainConfig {
            max_epochs: 30,
            batch_size: 2,
            train_size: (128, 96),
            val_crop: (192, 144),
            seed,
            ..TrainConfig::default()
        };
        let start = Instant::now();
        let mut model = Model::<f32>::new(&net, seed).map_err(|e| e.to_string())?;
        let outcome = train(&mut model, &self.train, &self.test, &tcfg, &LossConfig::default(), |_| {})
            .map_err(|e| e.to_string())?;
        let params = LocalizeParams::for_sigma(mean_sigma(&self.train));
        let report = evaluate(&mut model, &self.test, &params).map_err(|e| e.to_string())?;
        let time = start.elapsed();
        println!(
            "    {} seed {seed}: pMAE {:.1}% SSIM {:.3} MAE {:.2} PSNR {:.2} mAP {:.2} mAR {:.2} ({time:.0?})",
            net.variant_name(),
            report.pmae,
            report.ssim,
            report.mae,
            report.psnr,
            report.map,
            report.mar
        );
        Ok(BenchRun {
            report,
            history: outcome.history,
            time,
        })
    }
}

fn end_to_end(run: &BenchRun, n_train: usize, n_test: usize) -> Verdict {
    let r = &run.report;
    Ok((
        r.pmae <= 15.0 && r.ssim >= 0.80 && run.time <= Duration::from_secs(20 * 60),
        format!(
            "{n_train} train / {n_test} test scenes, 30 epochs: pMAE {:.1}%, SSIM {:.3}, {:.0?}",
            r.pmae, r.ssim, run.time
        ),
    ))
}

fn seg_effect(pairs: &[(f64, f64)]) -> Verdict {
    let wins = pairs.iter().filter(|(on, off)| on <= off).count();
    let deltas: Vec<String> = pairs
        .iter()
        .enumerate()
        .map(|(s, (on, off))| format!("seed {s}: {on:.2} vs {off:.2} ({:+.1}%)", 100.0 * (on - off) / off))
        .collect();
    Ok((
        wins >= 2,
        format!("seg MAE <= no-seg MAE on {wins}/3 seeds; {}", deltas.join("; ")),
    ))
}

fn lr_logged(histories: &[&[EpochRecord]]) -> Verdict {
    let mut worst = 0.0f64;
    let mut n = 0;
    for h in histories {
        for rec in *h {
            worst = worst.max((rec.lr - 4e-4 * 0.995f64.powi(rec.epoch as i32)).abs());
            n += 1;
        }
    }
    for (e, lr) in lr_schedule(&TrainConfig::default(), 200).iter().enumerate() {
        worst = worst.max((lr - 4e-4 * 0.995f64.powi(e as i32)).abs());
        n += 1;
    }
    Ok((worst <= 1e-12, format!("max deviation {worst:.1e} over {n} logged epochs")))
}

fn report(id: u32, name: &str, v: Verdict, failed: &mut Vec<u32>) {
    let (ok, detail) = v.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!("criterion {id} [{name}]: {} - {detail}", if ok { "PASS" } else { "FAIL" });
    if !ok {
        failed.push(id);
    }
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored.
    let quick = std::env::var("AGREGNET_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let mut failed = Vec::new();
    report(1, "unit mass", unit_mass(), &mut failed);
    report(2, "matching oracle", matching_oracle(), &mut failed);
    report(3, "metric oracles", metric_oracles(), &mut failed);
    report(4, "self-localization", self_localization(), &mut failed);
    report(5, "gradient check", gradient_check(), &mut failed);
    report(6, "shape and ablation contract", shape_contract(), &mut failed);

    if quick {
        for (id, name) in [(7, "synthetic end-to-end"), (8, "segmentation-branch effect"), (9, "lr schedule")] {
            println!("criterion {id} [{name}]: SKIP - AGREGNET_ACCEPTANCE_QUICK=1");
        }
    } else {
        match Bench::new() {
            Ok(bench) => {
                let mut runs = Vec::new();
                for seed in 0..3u64 {
                    let on = bench.run(seed, true);
                    let off = bench.run(seed, false);
                    runs.push((seed, on, off));
                }
                match &runs[0].1 {
                    Ok(run) => report(7, "synthetic end-to-end", end_to_end(run, bench.train.len(), bench.test.len()), &mut failed),
                    Err(e) => report(7, "synthetic end-to-end", Err(e.clone()), &mut failed),
                }
                let pairs: Result<Vec<(f64, f64)>, String> = runs
                    .iter()
                    .map(|(_, on, off)| match (on, off) {
                        (Ok(a), Ok(b)) => Ok((a.report.mae, b.report.mae)),
                        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
                    })
                    .collect();
                report(8, "segmentation-branch effect", pairs.and_then(|p| seg_effect(&p)), &mut failed);
                let histories: Vec<&[EpochRecord]> = runs
                    .iter()
                    .flat_map(|(_, on, off)| [on, off])
                    .filter_map(|r| r.as_ref().ok().map(|r| r.history.as_slice()))
                    .collect();
                report(9, "lr schedule", lr_logged(&histories), &mut failed);
            }
            Err(e) => {
                for (id, name) in [(7, "synthetic end-to-end"), (8, "segmentation-branch effect"), (9, "lr schedule")] {
                    report(id, name, Err(e.clone()), &mut failed);
                }
            }
        }
    }

    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
