//! Convolutional block attention: channel attention followed by spatial
//! attention, each applied multiplicatively.

use rand::Rng;

use super::{join, sigmoid, Conv2d, Init, Param, Parameters, Relu};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
struct CbamCache<T> {
    x: Tensor<T>,
    channel_map: Vec<T>,
    max_pos: Vec<usize>,
    gated: Tensor<T>,
    spatial_map: Tensor<T>,
    max_channel: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Cbam<T> {
    channels: usize,
    fc1: Conv2d<T>,
    relu: Relu<T>,
    fc2: Conv2d<T>,
    spatial: Conv2d<T>,
    cache: Option<CbamCache<T>>,
}

impl<T: Scalar> Cbam<T> {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        reduction: usize,
        spatial_kernel: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "CBAM channels ({channels}) must be divisible by the reduction ratio ({reduction})"
            )));
        }
        if spatial_kernel % 2 == 0 {
            return Err(Error::Config(format!("CBAM spatial kernel must be odd, got {spatial_kernel}")));
        }
        let hidden = channels / reduction;
        Ok(Self {
            channels,
            fc1: Conv2d::pointwise(channels, hidden, init, rng),
            relu: Relu::new(),
            fc2: Conv2d::pointwise(hidden, channels, init, rng),
            spatial: Conv2d::same(2, 1, spatial_kernel, 1, init, rng),
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Channel map (`[N * C]`) and the argmax position of each plane.
    fn channel_attention(&mut self, x: &Tensor<T>, train: bool) -> (Vec<T>, Vec<usize>) {
        let [n, c, _, _] = x.shape();
        let inv_hw = T::from_f64(1.0 / x.plane_len() as f64);
        let mut pooled = Tensor::zeros([2 * n, c, 1, 1]);
        let mut max_pos = Vec::with_capacity(n * c);
        for i in 0..n {
            for ch in 0..c {
                let plane = x.plane(i, ch);
                let mut best = 0;
                for (p, &v) in plane.iter().enumerate() {
                    if v > plane[best] {
                        best = p;
                    }
                }
                max_pos.push(best);
                pooled.data_mut()[i * c + ch] = plane.iter().copied().sum::<T>() * inv_hw;
                pooled.data_mut()[(n + i) * c + ch] = plane[best];
            }
        }
        let hidden = self.fc1.forward(&pooled, train);
        let hidden = self.relu.forward(&hidden, train);
        let logits = self.fc2.forward(&hidden, train);
        let (avg, max) = logits.data().split_at(n * c);
        let map = avg.iter().zip(max).map(|(&a, &b)| sigmoid(a + b)).collect();
        (map, max_pos)
    }

    /// Spatial map (`[N, 1, H, W]`) and the argmax channel at each pixel.
    fn spatial_attention(&mut self, x: &Tensor<T>, train: bool) -> (Tensor<T>, Vec<usize>) {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut pooled = Tensor::zeros([n, 2, h, w]);
        let mut max_channel = vec![0usize; n * hw];
        for i in 0..n {
            let mut avg = vec![T::zero(); hw];
            let mut max = x.plane(i, 0).to_vec();
            let arg = &mut max_channel[i * hw..(i + 1) * hw];
            for ch in 0..c {
                let plane = x.plane(i, ch);
                for p in 0..hw {
                    avg[p] += plane[p];
                    if plane[p] > max[p] {
                        max[p] = plane[p];
                        arg[p] = ch;
                    }
                }
            }
            avg.iter_mut().for_each(|v| *v *= inv_c);
            pooled.plane_mut(i, 0).copy_from_slice(&avg);
            pooled.plane_mut(i, 1).copy_from_slice(&max);
        }
        let logits = self.spatial.forward(&pooled, train);
        (logits.map(sigmoid), max_channel)
    }

    /// Evaluate both attention maps without caching: (`M_CAM` as `[N * C]`, `M_SAM`).
    ///
    /// `M_SAM` is computed on the channel-refined features, as in the forward pass.
    pub fn attention_maps(&mut self, x: &Tensor<T>) -> (Vec<T>, Tensor<T>) {
        let (cmap, _) = self.channel_attention(x, false);
        let gated = scale_channels(x, &cmap);
        let (smap, _) = self.spatial_attention(&gated, false);
        (cmap, smap)
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let (channel_map, max_pos) = self.channel_attention(x, train);
        let gated = scale_channels(x, &channel_map);
        let (spatial_map, max_channel) = self.spatial_attention(&gated, train);
        let y = gated.mul_plane_broadcast(&spatial_map);
        self.cache = train.then(|| CbamCache {
            x: x.clone(),
            channel_map,
            max_pos,
            gated,
            spatial_map,
            max_channel,
        });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("Cbam::backward without cached forward");
        let [n, c, h, w] = dy.shape();
        let hw = h * w;

        // y = gated * spatial_map
        let mut dgated = dy.mul_plane_broadcast(&cache.spatial_map);
        let mut dlogit = Tensor::zeros([n, 1, h, w]);
        for i in 0..n {
            let s = cache.spatial_map.plane(i, 0);
            let mut acc = vec![T::zero(); hw];
            for ch in 0..c {
                for ((a, &d), &g) in acc.iter_mut().zip(dy.plane(i, ch)).zip(cache.gated.plane(i, ch)) {
                    *a += d * g;
                }
            }
            for (p, v) in dlogit.plane_mut(i, 0).iter_mut().enumerate() {
                *v = acc[p] * s[p] * (T::one() - s[p]);
            }
        }
        let dpooled = self
            .spatial
            .backward(&dlogit, true)
            .expect("spatial conv input gradient");
        let inv_c = T::from_f64(1.0 / c as f64);
        for i in 0..n {
            let davg = dpooled.plane(i, 0).to_vec();
            let dmax = dpooled.plane(i, 1).to_vec();
            for ch in 0..c {
                for (v, &g) in dgated.plane_mut(i, ch).iter_mut().zip(&davg) {
                    *v += g * inv_c;
                }
            }
            for p in 0..hw {
                let ch = cache.max_channel[i * hw + p];
                dgated.plane_mut(i, ch)[p] += dmax[p];
            }
        }

        // gated = x * channel_map
        let mut dx = scale_channels(&dgated, &cache.channel_map);
        let mut dlogits = Tensor::zeros([2 * n, c, 1, 1]);
        for i in 0..n {
            for ch in 0..c {
                let m = cache.channel_map[i * c + ch];
                let dm: T = dgated
                    .plane(i, ch)
                    .iter()
                    .zip(cache.x.plane(i, ch))
                    .map(|(&a, &b)| a * b)
                    .sum();
                let dz = dm * m * (T::one() - m);
                dlogits.data_mut()[i * c + ch] = dz;
                dlogits.data_mut()[(n + i) * c + ch] = dz;
            }
        }
        let dhidden = self.fc2.backward(&dlogits, true).expect("fc2 input gradient");
        let dhidden = self.relu.backward(&dhidden);
        let dpool = self.fc1.backward(&dhidden, true).expect("fc1 input gradient");
        let inv_hw = T::from_f64(1.0 / hw as f64);
        for i in 0..n {
            for ch in 0..c {
                let da = dpool.data()[i * c + ch] * inv_hw;
                let dm = dpool.data()[(n + i) * c + ch];
                let pos = cache.max_pos[i * c + ch];
                let plane = dx.plane_mut(i, ch);
                plane.iter_mut().for_each(|v| *v += da);
                plane[pos] += dm;
            }
        }
        dx
    }
}

fn scale_channels<T: Scalar>(x: &Tensor<T>, scale: &[T]) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    let mut out = x.clone();
    for i in 0..n {
        for ch in 0..c {
            let s = scale[i * c + ch];
            out.plane_mut(i, ch).iter_mut().for_each(|v| *v *= s);
        }
    }
    out
}

impl<T: Scalar> Parameters<T> for Cbam<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.fc1.visit(&join(prefix, "mlp.0"), f);
        self.fc2.visit(&join(prefix, "mlp.2"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.fc1.visit_mut(&join(prefix, "mlp.0"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.2"), f);
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn rejects_indivisible_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            Cbam::<f32>::new(12, 8, 7, Init::HeNormal, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn preserves_shape_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cbam = Cbam::<f64>::new(8, 8, 7, Init::HeNormal, &mut rng).unwrap();
        let mut x = Tensor::zeros([1, 8, 4, 4]);
        x.plane_mut(0, 3).fill(10.0);
        let y = cbam.forward(&x, false);
        assert_eq!(y.shape(), [1, 8, 4, 4]);
        assert!(y.is_finite());
        let (cmap, smap) = cbam.attention_maps(&x);
        assert!(cmap.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(smap.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn channel_map_ignores_spatial_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cbam = Cbam::<f64>::new(8, 4, 7, Init::HeNormal, &mut rng).unwrap();
        let x = random([1, 8, 5, 6], &mut rng);
        let mut perm: Vec<usize> = (0..30).collect();
        perm.reverse();
        perm.swap(3, 17);
        let mut xp = x.clone();
        for ch in 0..8 {
            let src = x.plane(0, ch).to_vec();
            for (dst, &p) in xp.plane_mut(0, ch).iter_mut().zip(&perm) {
                *dst = src[p];
            }
        }
        let (a, _) = cbam.attention_maps(&x);
        let (b, _) = cbam.attention_maps(&xp);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_pooling_ignores_channel_permutation() {
        // The spatial map only sees channel-wise mean and max of its input.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cbam = Cbam::<f64>::new(8, 4, 7, Init::HeNormal, &mut rng).unwrap();
        let x = random([1, 8, 5, 5], &mut rng);
        let mut xp = x.clone();
        for ch in 0..8 {
            xp.plane_mut(0, ch).copy_from_slice(x.plane(0, 7 - ch));
        }
        let (s1, _) = cbam.spatial_attention(&x, false);
        let (s2, _) = cbam.spatial_attention(&xp, false);
        for (u, v) in s1.data().iter().zip(s2.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cbam = Cbam::<f64>::new(4, 2, 3, Init::HeNormal, &mut rng).unwrap();
        let x = random([2, 4, 3, 4], &mut rng);
        let y = cbam.forward(&x, true);
        let probe = random(y.shape(), &mut rng);
        let dx = cbam.backward(&probe);
        let h = 1e-6;
        for idx in [0, 5, 17, 30, 47, 60, 95] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let f = |t: &Tensor<f64>, c: &mut Cbam<f64>| -> f64 {
                c.forward(t, false).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
            };
            let fd = (f(&xp, &mut cbam) - f(&xm, &mut cbam)) / (2.0 * h);
            let an = dx.data()[idx];
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "idx {idx}: fd={fd} an={an}");
        }
    }
}
