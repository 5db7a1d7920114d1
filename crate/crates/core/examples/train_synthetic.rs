//! Train the toy network on synthetic scenes and report test metrics.
//!
//! cargo run --release --example train_synthetic -- [epochs] [seed] [seg:on|off] [cbam:on|off]

use std::time::Instant;

use agregnet::annotations::split_dataset;
use agregnet::groundtruth::SigmaPolicy;
use agregnet::imaging::to_tensor;
use agregnet::localization::LocalizeParams;
use agregnet::network::{Model, NetworkConfig};
use agregnet::synthdata::{generate_scene, SceneConfig};
use agregnet::training::{evaluate, mean_sigma, train, LossConfig, Sample, TrainConfig};

fn flag(v: Option<&String>, default: bool) -> bool {
    v.map_or(default, |s| s != "off")
}

fn main() -> agregnet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().and_then(|s| s.parse().ok()).unwrap_or(30);
    let seed = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let net = NetworkConfig::toy().with_ablation(flag(args.get(3), true), flag(args.get(2), true));

    let scenes = SceneConfig::default();
    let policy = SigmaPolicy::flower();
    let mut samples = Vec::new();
    for i in 0..80 {
        let (img, ann) = generate_scene(&scenes, i)?;
        samples.push(Sample::new(ann, to_tensor(&img), &policy)?);
    }
    let anns: Vec<_> = samples.iter().map(|s| s.annotation.clone()).collect();
    let split = split_dataset(&anns, 0.8, 0)?;
    let pick = |list: &[agregnet::annotations::AnnotatedImage]| -> Vec<Sample> {
        list.iter()
            .map(|a| samples.iter().find(|s| s.annotation.image_path == a.image_path).unwrap().clone())
            .collect()
    };
    let (tr, te) = (pick(&split.train), pick(&split.test));

    let tcfg = TrainConfig {
        max_epochs: epochs,
        batch_size: 2,
        train_size: (128, 96),
        val_crop: (192, 144),
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::<f32>::new(&net, seed)?;
    let start = Instant::now();
    let outcome = train(&mut model, &tr, &te, &tcfg, &LossConfig::default(), |_| {})?;
    let params = LocalizeParams::for_sigma(mean_sigma(&tr));
    let report = evaluate(&mut model, &te, &params)?;
    println!(
        "{} seed={seed} best_epoch={} time={:.0?}\nPSNR {:.2} SSIM {:.3} MAE {:.2} RMSE {:.2} pMAE {:.1}% mAP {:.3} mAR {:.3}",
        net.variant_name(),
        outcome.best_epoch,
        start.elapsed(),
        report.psnr,
        report.ssim,
        report.mae,
        report.rmse,
        report.pmae,
        report.map,
        report.mar
    );
    // Peak floor vs localization precision and recall.
    for k in [1.0, 4.0, 10.0] {
        let p = LocalizeParams {
            min_intensity: k * params.min_intensity,
            ..params
        };
        let r = evaluate(&mut model, &te, &p)?;
        println!("min_intensity x{k}: mAP {:.3} mAR {:.3}", r.map, r.mar);
    }
    Ok(())
}
