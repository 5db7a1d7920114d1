use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    join, upsample2x_backward, upsample2x_forward, Cbam, Conv2d, DepthwiseConv2d, Gelu, Init,
    LayerNorm2d, Param, Parameters,
};
use crate::tensor::{ConvGeometry, Scalar, Tensor};

use super::config::BLOCK_KERNEL;

/// Residual block: depthwise 7x7, LN, 1x1 expand x4, GELU, 1x1 project,
/// optional CBAM on the residual branch, then the identity add.
#[derive(Clone, Debug)]
pub struct ConvNextBlock<T> {
    dwconv: DepthwiseConv2d<T>,
    norm: LayerNorm2d<T>,
    pwconv1: Conv2d<T>,
    act: Gelu<T>,
    pwconv2: Conv2d<T>,
    cbam: Option<Cbam<T>>,
}

impl<T: Scalar> ConvNextBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        dilation: usize,
        cbam: Option<(usize, usize)>,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            dwconv: DepthwiseConv2d::new(dim, BLOCK_KERNEL, dilation, init, rng),
            norm: LayerNorm2d::new(dim),
            pwconv1: Conv2d::pointwise(dim, 4 * dim, init, rng),
            act: Gelu::new(),
            pwconv2: Conv2d::pointwise(4 * dim, dim, init, rng),
            cbam: cbam
                .map(|(r, k)| Cbam::new(dim, r, k, init, rng))
                .transpose()?,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let y = self.dwconv.forward(x, train);
        let y = self.norm.forward(&y, train);
        let y = self.pwconv1.forward(&y, train);
        let y = self.act.forward(&y, train);
        let mut y = self.pwconv2.forward(&y, train);
        if let Some(cbam) = self.cbam.as_mut() {
            y = cbam.forward(&y, train);
        }
        y.add_assign(x);
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mut g = match self.cbam.as_mut() {
            Some(cbam) => cbam.backward(dy),
            None => dy.clone(),
        };
        g = self.pwconv2.backward(&g, true).expect("input grad");
        g = self.act.backward(&g);
        g = self.pwconv1.backward(&g, true).expect("input grad");
        g = self.norm.backward(&g);
        let mut dx = self.dwconv.backward(&g);
        dx.add_assign(dy);
        dx
    }
}

impl<T: Scalar> Parameters<T> for ConvNextBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.dwconv.visit(&join(prefix, "dwconv"), f);
        self.norm.visit(&join(prefix, "norm"), f);
        self.pwconv1.visit(&join(prefix, "pwconv1"), f);
        self.pwconv2.visit(&join(prefix, "pwconv2"), f);
        if let Some(c) = &self.cbam {
            c.visit(&join(prefix, "cbam"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.dwconv.visit_mut(&join(prefix, "dwconv"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.pwconv1.visit_mut(&join(prefix, "pwconv1"), f);
        self.pwconv2.visit_mut(&join(prefix, "pwconv2"), f);
        if let Some(c) = &mut self.cbam {
            c.visit_mut(&join(prefix, "cbam"), f);
        }
    }
}

/// Entry layer of a stage: a convolution paired with a layer norm.
#[derive(Clone, Debug)]
pub struct Transition<T> {
    norm_first: bool,
    norm: LayerNorm2d<T>,
    conv: Conv2d<T>,
}

impl<T: Scalar> Transition<T> {
    /// Full-resolution stem: 3x3 conv then LN.
    pub fn stem<R: Rng + ?Sized>(cin: usize, cout: usize, init: Init, rng: &mut R) -> Self {
        Self {
            norm_first: false,
            norm: LayerNorm2d::new(cout),
            conv: Conv2d::same(cin, cout, 3, 1, init, rng),
        }
    }

    /// LN then 2x2 stride-2 conv.
    pub fn downsample<R: Rng + ?Sized>(cin: usize, cout: usize, init: Init, rng: &mut R) -> Self {
        let geometry = ConvGeometry {
            in_channels: cin,
            out_channels: cout,
            kernel: 2,
            stride: 2,
            padding: 0,
            dilation: 1,
        };
        Self {
            norm_first: true,
            norm: LayerNorm2d::new(cin),
            conv: Conv2d::new(geometry, init, rng),
        }
    }

    /// LN then a size-preserving dilated 3x3 conv.
    pub fn dilated<R: Rng + ?Sized>(cin: usize, cout: usize, dilation: usize, init: Init, rng: &mut R) -> Self {
        Self {
            norm_first: true,
            norm: LayerNorm2d::new(cin),
            conv: Conv2d::same(cin, cout, 3, dilation, init, rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        if self.norm_first {
            let y = self.norm.forward(x, train);
            self.conv.forward(&y, train)
        } else {
            let y = self.conv.forward(x, train);
            self.norm.forward(&y, train)
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        if self.norm_first {
            let g = self.conv.backward(dy, true).expect("input grad");
            Some(self.norm.backward(&g))
        } else {
            let g = self.norm.backward(dy);
            self.conv.backward(&g, need_input_grad)
        }
    }
}

impl<T: Scalar> Parameters<T> for Transition<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.conv.visit(&join(prefix, "conv"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Stage<T> {
    pub transition: Transition<T>,
    pub blocks: Vec<ConvNextBlock<T>>,
}

impl<T: Scalar> Stage<T> {
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let mut y = self.transition.forward(x, train);
        for b in &mut self.blocks {
            y = b.forward(&y, train);
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let mut g = dy.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g);
        }
        self.transition.backward(&g, need_input_grad)
    }
}

impl<T: Scalar> Parameters<T> for Stage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.transition.visit(&join(prefix, "transition"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.transition.visit_mut(&join(prefix, "transition"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}

/// One decoder level: (upsample x2 when needed), concatenate with the skip,
/// `conv3x3(cat -> cat)`, `conv3x3(cat -> cat/2)`, LN, GELU.
#[derive(Clone, Debug)]
pub struct DecoderBlock<T> {
    current_channels: usize,
    skip_channels: usize,
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    norm: LayerNorm2d<T>,
    act: Gelu<T>,
    upsampled: bool,
}

impl<T: Scalar> DecoderBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        current_channels: usize,
        skip_channels: usize,
        dilation: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let cat = current_channels + skip_channels;
        Self {
            current_channels,
            skip_channels,
            conv1: Conv2d::same(cat, cat, 3, dilation, init, rng),
            conv2: Conv2d::same(cat, cat / 2, 3, dilation, init, rng),
            norm: LayerNorm2d::new(cat / 2),
            act: Gelu::new(),
            upsampled: false,
        }
    }

    pub fn out_channels(&self) -> usize {
        (self.current_channels + self.skip_channels) / 2
    }

    pub fn forward(&mut self, current: &Tensor<T>, skip: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        if current.channels() != self.current_channels || skip.channels() != self.skip_channels {
            return Err(Error::Shape(format!(
                "decoder block expects {} + {} channels, got {} + {}",
                self.current_channels,
                self.skip_channels,
                current.channels(),
                skip.channels()
            )));
        }
        let (h, w) = (current.height(), current.width());
        let (sh, sw) = (skip.height(), skip.width());
        let upsampled = if (2 * h, 2 * w) == (sh, sw) {
            true
        } else if (h, w) == (sh, sw) {
            false
        } else {
            return Err(Error::Shape(format!(
                "decoder input {h}x{w} cannot be aligned with skip {sh}x{sw}"
            )));
        };
        let cat = if upsampled {
            Tensor::concat_channels(&upsample2x_forward(current), skip)
        } else {
            Tensor::concat_channels(current, skip)
        };
        let y = self.conv1.forward(&cat, train);
        let y = self.conv2.forward(&y, train);
        let y = self.norm.forward(&y, train);
        let y = self.act.forward(&y, train);
        self.upsampled = upsampled;
        Ok(y)
    }

    /// Returns gradients for (current, skip).
    pub fn backward(&mut self, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let g = self.act.backward(dy);
        let g = self.norm.backward(&g);
        let g = self.conv2.backward(&g, true).expect("input grad");
        let g = self.conv1.backward(&g, true).expect("input grad");
        let (dcur, dskip) = g.split_channels(self.current_channels);
        let dcur = if self.upsampled {
            upsample2x_backward(&dcur)
        } else {
            dcur
        };
        (dcur, dskip)
    }
}

impl<T: Scalar> Parameters<T> for DecoderBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

/// Two dilated 3x3 convolutions: `C -> C -> 1`.
#[derive(Clone, Debug)]
pub struct Head<T> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
}

impl<T: Scalar> Head<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, dilation: usize, init: Init, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::same(channels, channels, 3, dilation, init, rng),
            conv2: Conv2d::same(channels, 1, 3, dilation, init, rng),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Tensor<T> {
        let y = self.conv1.forward(x, train);
        self.conv2.forward(&y, train)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.conv2.backward(dy, true).expect("input grad");
        self.conv1.backward(&g, true).expect("input grad")
    }
}

impl<T: Scalar> Parameters<T> for Head<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f32> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn decoder_block_halves_concatenated_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut block = DecoderBlock::<f32>::new(64, 32, 2, Init::HeNormal, &mut rng);
        let cur = random([1, 64, 12, 16], &mut rng);
        let skip = random([1, 32, 24, 32], &mut rng);
        let y = block.forward(&cur, &skip, false).unwrap();
        assert_eq!(y.shape(), [1, 48, 24, 32]);
        let again = block.forward(&cur, &skip, false).unwrap();
        assert_eq!(y, again);
    }

    #[test]
    fn decoder_block_accepts_equal_sizes_and_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut block = DecoderBlock::<f32>::new(16, 16, 2, Init::HeNormal, &mut rng);
        let a = random([1, 16, 6, 8], &mut rng);
        assert_eq!(block.forward(&a, &a, false).unwrap().shape(), [1, 16, 6, 8]);
        let odd = random([1, 16, 5, 8], &mut rng);
        assert!(matches!(block.forward(&odd, &a, false), Err(Error::Shape(_))));
    }

    #[test]
    fn dilated_same_convolution_preserves_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut conv = Conv2d::<f32>::same(4, 4, 3, 2, Init::HeNormal, &mut rng);
        let x = random([1, 4, 7, 9], &mut rng);
        assert_eq!(conv.forward(&x, false).shape(), [1, 4, 7, 9]);
    }
}
