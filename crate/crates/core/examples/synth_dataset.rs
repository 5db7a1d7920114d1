//! Render a few synthetic canopy scenes and their annotation file.
//!
//! cargo run --example synth_dataset -- [out_dir] [count]

use std::path::PathBuf;

use agregnet::annotations::load_annotations;
use agregnet::synthdata::{generate_dataset, SceneConfig};

fn main() -> agregnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map_or_else(|| std::env::temp_dir().join("agregnet_synth"), PathBuf::from);
    let count = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);

    let cfg = SceneConfig {
        n_objects: (15, 25),
        ..SceneConfig::default()
    };
    generate_dataset(&cfg, count, &out)?;

    // The written file loads back through the regular annotation reader.
    let set = load_annotations(&out.join("annotations.json"))?;
    for img in &set.images {
        println!("{}: {}x{}, {} objects", img.image_path.display(), img.width, img.height, img.count());
    }
    println!("wrote {} scenes to {}", set.images.len(), out.display());
    Ok(())
}
