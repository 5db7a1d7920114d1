//! The segmentation-gated U-shaped density regression network.
//!
//! Encoder: five ConvNeXt-style stages. Stage 1 runs at full resolution,
//! stages 2-4 each halve the resolution, and stage 5 keeps the 1/8 scale
//! and uses dilated convolutions instead. Stage outputs 1-4 reach the
//! decoder through (optionally CBAM-gated) skip connections; stage 5 is
//! merged through a 1x1 convolution. Four decoder levels restore full
//! resolution. The segmentation head's sigmoid output gates the decoder
//! features before the density head.

mod blocks;
mod checkpoint;
mod config;

pub use blocks::{ConvNextBlock, DecoderBlock, Head, Stage, Transition};
pub use checkpoint::{load_checkpoint, save_checkpoint, EncoderLoadReport};
pub use config::{NetworkConfig, BLOCK_KERNEL, OUTPUT_STRIDE};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{join, sigmoid, Cbam, Conv2d, Param, Parameters};
use crate::tensor::{Scalar, Tensor};

/// Network predictions for a batch; both rasters are `[N, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T> {
    /// Raw density prediction (may be negative).
    pub density: Tensor<T>,
    /// Foreground probabilities, present when the segmentation branch is enabled.
    pub segmentation: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
struct GateCache<T> {
    features: Tensor<T>,
    segmentation: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: NetworkConfig,
    stages: Vec<Stage<T>>,
    skip_attention: Vec<Option<Cbam<T>>>,
    merge: Conv2d<T>,
    decoder: Vec<DecoderBlock<T>>,
    seg_head: Option<Head<T>>,
    density_head: Head<T>,
    gate_cache: Option<GateCache<T>>,
}

fn unscale<T: Scalar>(scale: f64, t: Tensor<T>) -> Tensor<T> {
    if scale == 1.0 {
        return t;
    }
    let inv = T::from_f64(1.0 / scale);
    t.map(|v| v * inv)
}

/// Build a model with seed-0 initialization.
pub fn build_model<T: Scalar>(config: &NetworkConfig) -> Result<Model<T>> {
    Model::new(config, 0)
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = config.init;
        let ch = &config.stage_channels;
        let cbam = config
            .use_cbam
            .then_some((config.cbam_reduction, config.cbam_spatial_kernel));

        let mut stages = Vec::with_capacity(5);
        for s in 0..5 {
            let transition = match s {
                0 => Transition::stem(3, ch[0], init, &mut rng),
                4 => Transition::dilated(ch[3], ch[4], config.stage5_dilation, init, &mut rng),
                _ => Transition::downsample(ch[s - 1], ch[s], init, &mut rng),
            };
            let dilation = if s == 4 { config.stage5_dilation } else { 1 };
            let blocks = (0..config.stage_blocks[s])
                .map(|_| ConvNextBlock::new(ch[s], dilation, cbam, init, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { transition, blocks });
        }

        let skip_attention = (0..4)
            .map(|s| {
                cbam.map(|(r, k)| Cbam::new(ch[s], r, k, init, &mut rng))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;

        let merge = Conv2d::pointwise(ch[4], ch[3], init, &mut rng);
        let mut decoder = Vec::with_capacity(4);
        let mut current = ch[3];
        for skip in [ch[3], ch[2], ch[1], ch[0]] {
            let block = DecoderBlock::new(current, skip, config.decoder_dilation, init, &mut rng);
            current = block.out_channels();
            decoder.push(block);
        }
        let seg_head = config
            .use_segmentation_branch
            .then(|| Head::new(current, config.decoder_dilation, init, &mut rng));
        let density_head = Head::new(current, config.decoder_dilation, init, &mut rng);

        Ok(Self {
            config: config.clone(),
            stages,
            skip_attention,
            merge,
            decoder,
            seg_head,
            density_head,
            gate_cache: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn trainable_parameters(&self) -> usize {
        self.num_params()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != 3 {
            return Err(Error::Shape(format!("expected a 3-channel image, got {c} channels")));
        }
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::Shape(format!(
                "input size {w}x{h} must be a positive multiple of {OUTPUT_STRIDE} in both dimensions"
            )));
        }
        Ok(())
    }

    /// Encoder + decoder: the full-resolution feature map fed to the heads.
    fn features(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut feats = Vec::with_capacity(5);
        let mut y = x.clone();
        for stage in &mut self.stages {
            y = stage.forward(&y, train);
            feats.push(y.clone());
        }
        let mut skips = Vec::with_capacity(4);
        for (f, attn) in feats.iter().zip(&mut self.skip_attention) {
            skips.push(match attn {
                Some(a) => a.forward(f, train),
                None => f.clone(),
            });
        }
        let mut cur = self.merge.forward(&feats[4], train);
        for (block, skip) in self.decoder.iter_mut().zip(skips.iter().rev()) {
            cur = block.forward(&cur, skip, train)?;
        }
        Ok(cur)
    }

    /// Forward pass. With `train` set, activations are cached for [`Model::backward`].
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<ModelOutput<T>> {
        let features = self.features(x, train)?;
        match self.seg_head.as_mut() {
            Some(seg_head) => {
                let segmentation = seg_head.forward(&features, train).map(sigmoid);
                let gated = features.mul_plane_broadcast(&segmentation);
                let density = unscale(self.config.density_scale, self.density_head.forward(&gated, train));
                self.gate_cache = train.then(|| GateCache {
                    features,
                    segmentation: segmentation.clone(),
                });
                Ok(ModelOutput {
                    density,
                    segmentation: Some(segmentation),
                })
            }
            None => Ok(ModelOutput {
                density: unscale(self.config.density_scale, self.density_head.forward(&features, train)),
                segmentation: None,
            }),
        }
    }

    /// Evaluation-mode forward.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<ModelOutput<T>> {
        self.forward(x, false)
    }

    /// Decoder features in evaluation mode.
    pub fn decoder_features(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.features(x, false)
    }

    /// Apply the density head to decoder features, optionally gated by a
    /// `[N, 1, H, W]` map.
    pub fn density_from_features(&mut self, features: &Tensor<T>, gate: Option<&Tensor<T>>) -> Tensor<T> {
        let raw = match gate {
            Some(g) => self.density_head.forward(&features.mul_plane_broadcast(g), false),
            None => self.density_head.forward(features, false),
        };
        unscale(self.config.density_scale, raw)
    }

    /// Back-propagate loss gradients w.r.t. the outputs of the last training
    /// forward. Parameter gradients are accumulated.
    pub fn backward(&mut self, d_density: &Tensor<T>, d_segmentation: Option<&Tensor<T>>) {
        let dgated = self.density_head.backward(&unscale(self.config.density_scale, d_density.clone()));
        let dfeat = match self.seg_head.as_mut() {
            Some(seg_head) => {
                let cache = self.gate_cache.take().expect("backward without training forward");
                let mut dfeat = dgated.mul_plane_broadcast(&cache.segmentation);
                let [n, c, h, w] = dgated.shape();
                let mut dlogit = Tensor::zeros([n, 1, h, w]);
                for i in 0..n {
                    let s = cache.segmentation.plane(i, 0);
                    let out = dlogit.plane_mut(i, 0);
                    for ch in 0..c {
                        for ((o, &g), &f) in out.iter_mut().zip(dgated.plane(i, ch)).zip(cache.features.plane(i, ch)) {
                            *o += g * f;
                        }
                    }
                    if let Some(ds) = d_segmentation {
                        for (o, &g) in out.iter_mut().zip(ds.plane(i, 0)) {
                            *o += g;
                        }
                    }
                    for (o, &sv) in out.iter_mut().zip(s) {
                        *o *= sv * (T::one() - sv);
                    }
                }
                dfeat.add_assign(&seg_head.backward(&dlogit));
                dfeat
            }
            None => dgated,
        };

        let mut dskips: Vec<Tensor<T>> = Vec::with_capacity(4);
        let mut dcur = dfeat;
        for block in self.decoder.iter_mut().rev() {
            let (dc, ds) = block.backward(&dcur);
            dskips.push(ds);
            dcur = dc;
        }
        // dskips is ordered stage 1..4.
        let df5 = self.merge.backward(&dcur, true).expect("input grad");
        let mut dfeats: Vec<Tensor<T>> = dskips
            .into_iter()
            .zip(&mut self.skip_attention)
            .map(|(d, attn)| match attn {
                Some(a) => a.backward(&d),
                None => d,
            })
            .collect();
        dfeats.push(df5);

        let mut carry: Option<Tensor<T>> = None;
        for s in (0..5).rev() {
            let mut g = dfeats[s].clone();
            if let Some(c) = carry.take() {
                g.add_assign(&c);
            }
            carry = self.stages[s].backward(&g, s > 0);
        }
    }
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("encoder.stage{}", i + 1)), f);
        }
        for (i, a) in self.skip_attention.iter().enumerate() {
            if let Some(a) = a {
                a.visit(&join(prefix, &format!("skip_attention.{}", i + 1)), f);
            }
        }
        self.merge.visit(&join(prefix, "decoder.merge"), f);
        for (i, d) in self.decoder.iter().enumerate() {
            d.visit(&join(prefix, &format!("decoder.level{}", i + 1)), f);
        }
        if let Some(h) = &self.seg_head {
            h.visit(&join(prefix, "seg_head"), f);
        }
        self.density_head.visit(&join(prefix, "density_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("encoder.stage{}", i + 1)), f);
        }
        for (i, a) in self.skip_attention.iter_mut().enumerate() {
            if let Some(a) = a {
                a.visit_mut(&join(prefix, &format!("skip_attention.{}", i + 1)), f);
            }
        }
        self.merge.visit_mut(&join(prefix, "decoder.merge"), f);
        for (i, d) in self.decoder.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("decoder.level{}", i + 1)), f);
        }
        if let Some(h) = &mut self.seg_head {
            h.visit_mut(&join(prefix, "seg_head"), f);
        }
        self.density_head.visit_mut(&join(prefix, "density_head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([1, 3, h, w], (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn toy_forward_shapes_on_96x128() {
        let cfg = NetworkConfig {
            stage_channels: vec![8, 16, 32, 64, 128],
            ..NetworkConfig::default()
        };
        let mut m = build_model::<f32>(&cfg).unwrap();
        let out = m.predict(&random_image(96, 128, 1)).unwrap();
        assert_eq!(out.density.shape(), [1, 1, 96, 128]);
        assert_eq!(out.segmentation.unwrap().shape(), [1, 1, 96, 128]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut m = build_model::<f32>(&NetworkConfig::toy()).unwrap();
        assert!(matches!(m.predict(&random_image(20, 16, 0)), Err(Error::Shape(_))));
        let mut bad = Tensor::<f32>::zeros([1, 1, 16, 16]);
        bad.data_mut()[0] = 1.0;
        assert!(m.predict(&bad).is_err());
    }

    #[test]
    fn zero_input_gives_finite_bounded_outputs() {
        let mut m = build_model::<f32>(&NetworkConfig::toy()).unwrap();
        let out = m.predict(&Tensor::zeros([1, 3, 32, 48])).unwrap();
        assert!(out.density.is_finite());
        let seg = out.segmentation.unwrap();
        assert!(seg.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut m = Model::<f32>::new(&NetworkConfig::toy(), 7).unwrap();
        let x = random_image(32, 40, 3);
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_ones_gate_is_identity() {
        let mut m = Model::<f32>::new(&NetworkConfig::toy(), 5).unwrap();
        let x = random_image(32, 32, 9);
        let feats = m.decoder_features(&x).unwrap();
        let ones = Tensor::full([1, 1, 32, 32], 1.0);
        let gated = m.density_from_features(&feats, Some(&ones));
        let plain = m.density_from_features(&feats, None);
        assert_eq!(gated, plain);
    }

    #[test]
    fn ablation_flags_increase_parameter_count() {
        let base = NetworkConfig::toy();
        let count = |c: &NetworkConfig| build_model::<f32>(c).unwrap().trainable_parameters();
        let [none, cbam, seg, both] = base.ablation_variants();
        assert!(count(&cbam) > count(&none));
        assert!(count(&seg) > count(&none));
        assert!(count(&both) > count(&cbam));
        assert!(count(&both) > count(&seg));
    }

    #[test]
    fn parameter_names_are_unique() {
        let m = build_model::<f32>(&NetworkConfig::toy()).unwrap();
        let mut names = Vec::new();
        m.visit("", &mut |n, _| names.push(n.to_string()));
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
        assert!(names.contains(&"encoder.stage1.blocks.0.dwconv.weight".to_string()));
    }
}
