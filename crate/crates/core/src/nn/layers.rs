use rand::Rng;

use super::{join, Init, Param, Parameters};
use crate::tensor::{
    conv2d_backward, conv2d_forward, depthwise_backward, depthwise_forward, ConvGeometry, Scalar,
    Tensor,
};

/// Dense 2-D convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub geometry: ConvGeometry,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(geometry: ConvGeometry, init: Init, rng: &mut R) -> Self {
        let ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            ..
        } = geometry;
        let fan_in = cin * k * k;
        Self {
            geometry,
            weight: Param::new(vec![cout, cin, k, k], init.sample(fan_in, cout * fan_in, rng)),
            bias: Param::filled(vec![cout], T::zero()),
            input: None,
        }
    }

    /// `k x k` convolution that preserves spatial size at the given dilation.
    pub fn same<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, dilation: usize, init: Init, rng: &mut R) -> Self {
        Self::new(
            ConvGeometry {
                in_channels: cin,
                out_channels: cout,
                kernel: k,
                stride: 1,
                padding: dilation * (k - 1) / 2,
                dilation,
            },
            init,
            rng,
        )
    }

    pub fn pointwise<R: Rng + ?Sized>(cin: usize, cout: usize, init: Init, rng: &mut R) -> Self {
        Self::same(cin, cout, 1, 1, init, rng)
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let y = conv2d_forward(x, &self.weight.value, Some(&self.bias.value), &self.geometry);
        self.input = train.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let x = self.input.take().expect("Conv2d::backward without cached forward");
        conv2d_backward(
            &x,
            &self.weight.value,
            dy,
            &self.geometry,
            &mut self.weight.grad,
            Some(&mut self.bias.grad),
            need_input_grad,
        )
    }
}

impl<T: Scalar> Parameters<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Depthwise (one filter per channel) same-size convolution.
#[derive(Clone, Debug)]
pub struct DepthwiseConv2d<T> {
    pub kernel: usize,
    pub dilation: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> DepthwiseConv2d<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, kernel: usize, dilation: usize, init: Init, rng: &mut R) -> Self {
        let kk = kernel * kernel;
        Self {
            kernel,
            dilation,
            weight: Param::new(vec![channels, 1, kernel, kernel], init.sample(kk, channels * kk, rng)),
            bias: Param::filled(vec![channels], T::zero()),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let y = depthwise_forward(x, &self.weight.value, &self.bias.value, self.kernel, self.dilation);
        self.input = train.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("DepthwiseConv2d::backward without cached forward");
        depthwise_backward(
            &x,
            &self.weight.value,
            dy,
            self.kernel,
            self.dilation,
            &mut self.weight.grad,
            &mut self.bias.grad,
        )
    }
}

impl<T: Scalar> Parameters<T> for DepthwiseConv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Layer normalization over the channel axis at every pixel.
#[derive(Clone, Debug)]
pub struct LayerNorm2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    eps: f64,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Scalar> LayerNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Param::filled(vec![channels], T::one()),
            bias: Param::filled(vec![channels], T::zero()),
            eps: 1e-6,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let inv_c = T::from_f64(1.0 / c as f64);
        let eps = T::from_f64(self.eps);
        let mut xhat = Tensor::zeros(x.shape());
        let mut rstd_all = Vec::with_capacity(n * hw);
        let mut mean = vec![T::zero(); hw];
        let mut var = vec![T::zero(); hw];
        for i in 0..n {
            mean.fill(T::zero());
            var.fill(T::zero());
            for ch in 0..c {
                for (m, &v) in mean.iter_mut().zip(x.plane(i, ch)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_c);
            for ch in 0..c {
                for ((s, &v), &m) in var.iter_mut().zip(x.plane(i, ch)).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            let rstd: Vec<T> = var.iter().map(|&s| T::one() / (s * inv_c + eps).sqrt()).collect();
            for ch in 0..c {
                let src = x.plane(i, ch);
                let dst = xhat.plane_mut(i, ch);
                for p in 0..hw {
                    dst[p] = (src[p] - mean[p]) * rstd[p];
                }
            }
            rstd_all.extend_from_slice(&rstd);
        }
        let mut y = xhat.clone();
        for i in 0..n {
            for ch in 0..c {
                let (g, b) = (self.weight.value[ch], self.bias.value[ch]);
                y.plane_mut(i, ch).iter_mut().for_each(|v| *v = *v * g + b);
            }
        }
        self.cache = train.then_some((xhat, rstd_all));
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (xhat, rstd) = self.cache.take().expect("LayerNorm2d::backward without cached forward");
        let [n, c, h, w] = dy.shape();
        let hw = h * w;
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut dx = Tensor::zeros(dy.shape());
        let mut mean_g = vec![T::zero(); hw];
        let mut mean_gx = vec![T::zero(); hw];
        for i in 0..n {
            mean_g.fill(T::zero());
            mean_gx.fill(T::zero());
            for ch in 0..c {
                let g = self.weight.value[ch];
                let d = dy.plane(i, ch);
                let xh = xhat.plane(i, ch);
                let mut sw = T::zero();
                let mut sb = T::zero();
                for p in 0..hw {
                    sw += d[p] * xh[p];
                    sb += d[p];
                    let gh = d[p] * g;
                    mean_g[p] += gh;
                    mean_gx[p] += gh * xh[p];
                }
                self.weight.grad[ch] += sw;
                self.bias.grad[ch] += sb;
            }
            let r = &rstd[i * hw..(i + 1) * hw];
            for ch in 0..c {
                let g = self.weight.value[ch];
                let d = dy.plane(i, ch);
                let xh = xhat.plane(i, ch);
                let out = dx.plane_mut(i, ch);
                for p in 0..hw {
                    out[p] = r[p] * (d[p] * g - mean_g[p] * inv_c - xh[p] * mean_gx[p] * inv_c);
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Exact (erf-based) GELU.
#[derive(Clone, Debug, Default)]
pub struct Gelu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Gelu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let y = x.map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()));
        self.input = train.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("Gelu::backward without cached forward");
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let mut dx = dy.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
            let pdf = inv_sqrt_2pi * (-half * v * v).exp();
            *d *= cdf + v * pdf;
        }
        dx
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu<T> {
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let y = x.map(|v| v.max(T::zero()));
        self.input = train.then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.take().expect("Relu::backward without cached forward");
        let mut dx = dy.clone();
        for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
            if v <= T::zero() {
                *d = T::zero();
            }
        }
        dx
    }
}
