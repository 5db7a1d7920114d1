//! Peak detection and one-to-one matching on a noisy density map.
//!
//! cargo run --example localize_peaks

use agregnet::groundtruth::{make_density_map, SigmaPolicy};
use agregnet::localization::{localize, LocalizeParams};
use agregnet::metrics::ap_ar_sweep;
use agregnet::synthdata::{generate_scene, SceneConfig};
use rand::{Rng, SeedableRng};

fn main() -> agregnet::Result<()> {
    let (_, ann) = generate_scene(&SceneConfig::default(), 3)?;
    let gt = make_density_map(&ann, &SigmaPolicy::flower())?;
    let mean_sigma = gt.mean_sigma().unwrap_or(1.0);

    // A stand-in prediction: the ground truth with multiplicative noise.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut pred = gt.data.clone();
    for v in pred.data_mut() {
        *v *= rng.gen_range(0.7..1.3f32);
    }

    let params = LocalizeParams::for_sigma(mean_sigma);
    let loc = localize(&pred, &ann.coords(), &params);
    println!(
        "{} annotated, count {:.2}, {} peaks (min_distance {}, min_intensity {:.2e})",
        ann.count(),
        loc.count,
        loc.peaks.len(),
        params.min_distance,
        params.min_intensity
    );
    for p in loc.matching.pairs.iter().take(5) {
        println!("  gt {:>2} -> peak {:>2} at {:.2} px", p.gt_index, p.pred_index, p.distance);
    }
    let (ap, ar) = ap_ar_sweep(&loc.matching, &gt.sigmas)?;
    println!("AP {ap:.3} AR {ar:.3}, total matching cost {:.2}", loc.matching.total_cost());
    println!("{}", loc.to_json()["unmatched_pred"]);
    Ok(())
}
