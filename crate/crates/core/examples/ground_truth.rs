//! Density and segmentation maps from point annotations.
//!
//! cargo run --example ground_truth

use agregnet::annotations::{AnnotatedImage, PointAnnotation};
use agregnet::groundtruth::{generate_ground_truth, SigmaPolicy};
use agregnet::raster;

fn main() -> agregnet::Result<()> {
    let points = [(20.0, 20.0), (40.0, 20.0), (30.5, 44.2), (90.0, 60.0), (2.0, 70.0)];
    let image = AnnotatedImage {
        image_path: "toy.png".into(),
        width: 120,
        height: 80,
        points: points.iter().map(|&(x, y)| PointAnnotation::new(x, y, "flower")).collect(),
    };

    for (name, policy) in [("flower", SigmaPolicy::flower()), ("fruit", SigmaPolicy::fruit())] {
        let gt = generate_ground_truth(&image, &policy)?;
        let sigmas: Vec<String> = gt.density.sigmas.iter().map(|s| format!("{s:.2}")).collect();
        println!(
            "{name}: sigmas [{}], density sum {:.6}, foreground pixels {}",
            sigmas.join(", "),
            gt.density.count(),
            gt.segmentation.foreground()
        );
    }

    // Rasters round-trip through the FMAP/1 format.
    let gt = generate_ground_truth(&image, &SigmaPolicy::flower())?;
    let dir = std::env::temp_dir().join("agregnet_gt");
    let path = dir.join("toy.density.fmap");
    raster::write_f32(&path, &gt.density.data)?;
    let back = raster::read_f32(&path)?;
    assert_eq!(back, gt.density.data);
    println!("wrote {} ({} bytes)", path.display(), std::fs::metadata(&path).map_or(0, |m| m.len()));
    Ok(())
}
