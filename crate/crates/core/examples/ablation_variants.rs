//! The four ablation variants: sizes, output shapes and one training step each.
//!
//! cargo run --release --example ablation_variants -- [toy|default]

use agregnet::network::{Model, NetworkConfig};
use agregnet::nn::Parameters;
use agregnet::tensor::Tensor;
use agregnet::training::{loss_and_gradients, Adam, LossConfig};

fn main() -> agregnet::Result<()> {
    let base = match std::env::args().nth(1).as_deref() {
        Some("default") => NetworkConfig::default(),
        _ => NetworkConfig::toy(),
    };
    let x = Tensor::full([1, 3, 64, 96], 0.5f32);
    let gt_density = Tensor::full([1, 1, 64, 96], 1e-3f32);
    let gt_seg = Tensor::from_vec([1, 1, 64, 96], (0..64 * 96).map(|i| (i % 5 == 0) as u8 as f32).collect());
    for cfg in base.ablation_variants() {
        let mut model = Model::<f32>::new(&cfg, 0)?;
        model.zero_grad();
        let out = model.forward(&x, true)?;
        let (loss, dd, ds) = loss_and_gradients(&out, &gt_density, &gt_seg, &LossConfig::default())?;
        model.backward(&dd, ds.as_ref());
        Adam::new(0.9, 0.999, 1e-8).step(&mut model, 4e-4);
        println!(
            "{:<26} {:>9} params  density {:?}  segmentation {:?}  loss {:.4}",
            cfg.variant_name(),
            model.trainable_parameters(),
            out.density.shape(),
            out.segmentation.as_ref().map(|s| s.shape()),
            loss.total
        );
    }
    Ok(())
}
