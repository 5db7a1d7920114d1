//! Dataset metrics for predictions of varying quality.
//!
//! cargo run --example evaluate_metrics

use agregnet::groundtruth::{make_density_map, SigmaPolicy};
use agregnet::localization::LocalizeParams;
use agregnet::metrics::{aggregate, evaluate_prediction};
use agregnet::raster::Raster;
use agregnet::synthdata::{generate_scene, SceneConfig};

fn blur(r: &Raster<f32>) -> Raster<f32> {
    let (w, h) = r.dims();
    let mut out = Raster::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            let mut n = 0.0;
            for (dx, dy) in [(0i64, 0i64), (1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                    s += r.get(xx as usize, yy as usize);
                    n += 1.0;
                }
            }
            out.set(x, y, s / n);
        }
    }
    out
}

fn main() -> agregnet::Result<()> {
    let policy = SigmaPolicy::flower();
    let scenes = (0..6)
        .map(|i| generate_scene(&SceneConfig::default(), i).map(|(_, a)| a))
        .collect::<agregnet::Result<Vec<_>>>()?;
    let maps = scenes.iter().map(|a| make_density_map(a, &policy)).collect::<agregnet::Result<Vec<_>>>()?;
    let all: Vec<f64> = maps.iter().flat_map(|m| m.sigmas.iter().copied()).collect();
    let params = LocalizeParams::for_sigma(all.iter().sum::<f64>() / all.len() as f64);

    let variants: [(&str, fn(&Raster<f32>) -> Raster<f32>); 3] = [
        ("exact", |r| r.clone()),
        ("blurred", |r| (0..12).fold(r.clone(), |acc, _| blur(&acc))),
        ("over-counting x1.2", |r| r.map(|v| v * 1.2)),
    ];
    println!("| Prediction | PSNR | SSIM | MAE | RMSE | pMAE (%) | mAP | mAR |");
    println!("|---|---:|---:|---:|---:|---:|---:|---:|");
    for (name, f) in variants {
        let per_image = scenes
            .iter()
            .zip(&maps)
            .map(|(a, m)| evaluate_prediction(a.image_path.clone(), &f(&m.data), &m.data, &a.coords(), &m.sigmas, &params))
            .collect::<agregnet::Result<Vec<_>>>()?;
        let r = aggregate(per_image)?;
        println!(
            "| {name} | {:.2} | {:.3} | {:.2} | {:.2} | {:.1} | {:.2} | {:.2} |",
            r.psnr, r.ssim, r.mae, r.rmse, r.pmae, r.map, r.mar
        );
    }
    Ok(())
}
