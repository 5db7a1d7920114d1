//! Time one forward/backward step of a network config.
//!
//! cargo run --release --example throughput -- [toy|default] [width] [height]

use std::time::Instant;

use agregnet::network::{Model, NetworkConfig};
use agregnet::tensor::Tensor;

fn main() -> agregnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let config = match args.first().map(String::as_str) {
        Some("default") => NetworkConfig::default(),
        _ => NetworkConfig::toy(),
    };
    let w: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(256);
    let h: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(192);
    let mut model = Model::<f32>::new(&config, 0)?;
    println!("{} params={}", config.variant_name(), model.trainable_parameters());
    let x = Tensor::full([1, 3, h, w], 0.5f32);
    for _ in 0..3 {
        let t = Instant::now();
        let out = model.forward(&x, true)?;
        let fwd = t.elapsed();
        let dd = out.density.map(|_| 1e-3);
        let ds = out.segmentation.as_ref().map(|s| s.map(|_| 1e-3));
        model.backward(&dd, ds.as_ref());
        println!("{w}x{h}: forward {:?}, forward+backward {:?}", fwd, t.elapsed());
    }
    Ok(())
}
