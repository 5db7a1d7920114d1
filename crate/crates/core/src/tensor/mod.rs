//! Dense NCHW tensors and the numeric kernels the network layers are built on.
//!
//! Everything is generic over [`Scalar`] so the same model runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod conv;
mod scalar;

pub use conv::{conv2d_backward, conv2d_forward, depthwise_backward, depthwise_forward, ConvGeometry};
pub use scalar::{gemm, MatRef, Scalar};

/// A 4-D tensor laid out as `[batch, channels, height, width]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of elements in one spatial plane.
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// The `[channels, height, width]` block of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let sz = self.shape[1] * self.plane_len();
        &self.data[n * sz..(n + 1) * sz]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let sz = self.shape[1] * self.plane_len();
        &mut self.data[n * sz..(n + 1) * sz]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.plane_len();
        let off = (n * self.shape[1] + c) * hw;
        &self.data[off..off + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.plane_len();
        let off = (n * self.shape[1] + c) * hw;
        &mut self.data[off..off + hw]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().fold(T::zero(), |a, b| a + b)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Concatenate two tensors along the channel axis.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        let [n, ca, h, w] = a.shape;
        let [nb, cb, hb, wb] = b.shape;
        assert!(
            n == nb && h == hb && w == wb,
            "concat of mismatched tensors {:?} and {:?}",
            a.shape,
            b.shape
        );
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            out.extend_from_slice(a.item(i));
            out.extend_from_slice(b.item(i));
        }
        Self::from_vec([n, ca + cb, h, w], out)
    }

    /// Inverse of [`Tensor::concat_channels`]: split after `first` channels.
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        let [n, c, h, w] = self.shape;
        assert!(first <= c);
        let hw = h * w;
        let mut a = Vec::with_capacity(n * first * hw);
        let mut b = Vec::with_capacity(n * (c - first) * hw);
        for i in 0..n {
            let item = self.item(i);
            a.extend_from_slice(&item[..first * hw]);
            b.extend_from_slice(&item[first * hw..]);
        }
        (
            Self::from_vec([n, first, h, w], a),
            Self::from_vec([n, c - first, h, w], b),
        )
    }

    /// Stack single-item tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Self {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let [_, c, h, w] = items[0].shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            assert_eq!([c, h, w], [t.shape[1], t.shape[2], t.shape[3]]);
            data.extend_from_slice(&t.data);
        }
        let n = data.len() / (c * h * w).max(1);
        Self::from_vec([n, c, h, w], data)
    }

    /// Copy out a single batch item as a `[1, C, H, W]` tensor.
    pub fn select(&self, n: usize) -> Self {
        Self::from_vec([1, self.shape[1], self.shape[2], self.shape[3]], self.item(n).to_vec())
    }

    /// Multiply every channel by a `[N, 1, H, W]` gate.
    pub fn mul_plane_broadcast(&self, gate: &Self) -> Self {
        let [n, c, h, w] = self.shape;
        assert_eq!(gate.shape, [n, 1, h, w]);
        let mut out = self.clone();
        for i in 0..n {
            let g = gate.plane(i, 0);
            for ch in 0..c {
                for (o, &gv) in out.plane_mut(i, ch).iter_mut().zip(g) {
                    *o *= gv;
                }
            }
        }
        out
    }
}
