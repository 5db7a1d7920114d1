//! Near-duplicate screening and the seeded train/test split.
//!
//! cargo run --example dedup_split

use agregnet::annotations::{drop_later, find_near_duplicates, split_dataset, validation_crops, AnnotatedImage};
use agregnet::imaging::save_rgb;
use agregnet::synthdata::{generate_scene, SceneConfig};

fn main() -> agregnet::Result<()> {
    let dir = std::env::temp_dir().join("agregnet_dedup");
    let mut images: Vec<AnnotatedImage> = Vec::new();
    for i in 0..6 {
        let (img, ann) = generate_scene(&SceneConfig::default(), i)?;
        save_rgb(&dir.join(&ann.image_path), &img)?;
        images.push(ann);
    }
    // Re-save scene 2 under a second name.
    let (img, mut copy) = generate_scene(&SceneConfig::default(), 2)?;
    copy.image_path = "img_0002_again.png".into();
    save_rgb(&dir.join(&copy.image_path), &img)?;
    images.push(copy);

    let pairs = find_near_duplicates(&images, &dir, 0.95)?;
    for (a, b) in &pairs {
        println!("near duplicate: {} ~ {}", a.display(), b.display());
    }
    let kept = drop_later(&images, &pairs);
    println!("{} of {} images kept", kept.len(), images.len());

    let split = split_dataset(&kept, 0.75, 0)?;
    let names = |v: &[AnnotatedImage]| v.iter().map(|i| i.image_path.display().to_string()).collect::<Vec<_>>();
    println!("train {:?}\ntest  {:?}", names(&split.train), names(&split.test));
    for (img, win) in split.test.iter().zip(validation_crops(&split.test, (192, 144), 7)) {
        println!("validation crop of {}: {:?}, {} objects inside", img.image_path.display(), win, win.apply(img).count());
    }
    Ok(())
}
