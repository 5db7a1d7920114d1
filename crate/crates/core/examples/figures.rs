//! Overlay figures: density heatmap and color-coded localization.
//!
//! cargo run --example figures -- [out_dir]

use std::path::PathBuf;

use agregnet::cli::{density_overlay, localization_overlay};
use agregnet::groundtruth::{make_density_map, SigmaPolicy};
use agregnet::imaging::save_rgb;
use agregnet::localization::{localize, LocalizeParams};
use agregnet::metrics::threshold_grid;
use agregnet::synthdata::{generate_scene, SceneConfig};

fn main() -> agregnet::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("agregnet_figures"), PathBuf::from);
    let (img, ann) = generate_scene(&SceneConfig::default(), 5)?;
    let gt = make_density_map(&ann, &SigmaPolicy::flower())?;

    // Drop every third object from the "prediction" and shift it a little,
    // so all four marker colors show up.
    let mut pred = agregnet::raster::Raster::new(gt.data.width(), gt.data.height());
    for (i, p) in ann.points.iter().enumerate().filter(|(i, _)| i % 3 != 0) {
        let one = agregnet::annotations::AnnotatedImage {
            points: vec![agregnet::annotations::PointAnnotation::new(p.x + (i % 4) as f64, p.y, "flower")],
            ..ann.clone()
        };
        let d = agregnet::groundtruth::density_with_sigmas(&one, vec![gt.sigmas[i]])?;
        for (a, b) in pred.data_mut().iter_mut().zip(d.data.data()) {
            *a += b;
        }
    }

    let loc = localize(&pred, &ann.coords(), &LocalizeParams::for_sigma(gt.mean_sigma().unwrap_or(1.0)));
    let threshold = threshold_grid(&gt.sigmas)[0];
    save_rgb(&out.join("density.png"), &density_overlay(&img, &pred))?;
    save_rgb(&out.join("points.png"), &localization_overlay(&img, &ann.coords(), &loc, threshold))?;
    println!("wrote density.png and points.png to {}", out.display());
    Ok(())
}
