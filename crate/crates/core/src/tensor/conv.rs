//! Convolution kernels: im2col + GEMM for dense convolutions, direct loops
//! for depthwise ones.

use super::scalar::{gemm, MatRef};
use super::{Scalar, Tensor};

/// Upper bound on im2col buffer size (elements) per tile.
const COL_BUDGET: usize = 1 << 16;

/// Shape parameters of a dense 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let ho = (h + 2 * self.padding).saturating_sub(span) / self.stride + 1;
        let wo = (w + 2 * self.padding).saturating_sub(span) / self.stride + 1;
        (ho, wo)
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn tile_rows(&self, wo: usize) -> usize {
        (COL_BUDGET / (self.col_rows() * wo).max(1)).max(1)
    }

    /// Range of output columns whose input column lands inside `[0, w)` for kernel tap `kx`.
    fn valid_range(&self, tap: usize, w: usize, wo: usize) -> (usize, usize) {
        let off = (tap * self.dilation) as isize - self.padding as isize;
        let s = self.stride as isize;
        // ox*s + off >= 0  and  ox*s + off <= w-1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = w as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let lo = lo.max(0) as usize;
        let hi = (hi + 1).clamp(0, wo as isize) as usize;
        (lo.min(hi), hi)
    }
}

fn im2col<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    g: &ConvGeometry,
    oy0: usize,
    oy1: usize,
    wo: usize,
    col: &mut [T],
) {
    let k = g.kernel;
    let cols = (oy1 - oy0) * wo;
    let hw = h * w;
    for c in 0..g.in_channels {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi) = g.valid_range(kx, w, wo);
                let xoff = (kx * g.dilation) as isize - g.padding as isize;
                for oy in oy0..oy1 {
                    let seg = &mut dst[(oy - oy0) * wo..(oy - oy0 + 1) * wo];
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    seg[..lo].fill(T::zero());
                    seg[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = (lo as isize + xoff) as usize;
                        seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for (ox, v) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                            *v = src[(ox as isize * g.stride as isize + xoff) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    col: &[T],
    h: usize,
    w: usize,
    g: &ConvGeometry,
    oy0: usize,
    oy1: usize,
    wo: usize,
    dx: &mut [T],
) {
    let k = g.kernel;
    let cols = (oy1 - oy0) * wo;
    let hw = h * w;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = g.valid_range(kx, w, wo);
                if lo >= hi {
                    continue;
                }
                let xoff = (kx * g.dilation) as isize - g.padding as isize;
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let seg = &src[(oy - oy0) * wo..(oy - oy0 + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        let start = (lo as isize + xoff) as usize;
                        for (d, &s) in dst[start..start + (hi - lo)].iter_mut().zip(&seg[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for ox in lo..hi {
                            dst[(ox as isize * g.stride as isize + xoff) as usize] += seg[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution. `weight` is `[out, in * k * k]`, `bias` is `[out]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert_eq!(c, g.in_channels, "conv input channels");
    assert_eq!(weight.len(), g.out_channels * g.col_rows());
    let (ho, wo) = g.output_size(h, w);
    let how = ho * wo;
    let mut out = Tensor::zeros([n, g.out_channels, ho, wo]);
    let kk = g.col_rows();
    let wmat = MatRef::new(weight, kk);
    let tile = g.tile_rows(wo);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * tile.min(ho) * wo]
    };
    for i in 0..n {
        let xi = x.item(i);
        let oi = out.item_mut(i);
        if g.is_pointwise() {
            gemm(g.out_channels, kk, how, T::one(), wmat, MatRef::new(xi, how), T::zero(), oi, how);
        } else {
            let mut oy0 = 0;
            while oy0 < ho {
                let oy1 = (oy0 + tile).min(ho);
                let cols = (oy1 - oy0) * wo;
                im2col(xi, h, w, g, oy0, oy1, wo, &mut col[..kk * cols]);
                gemm(
                    g.out_channels,
                    kk,
                    cols,
                    T::one(),
                    wmat,
                    MatRef::new(&col[..kk * cols], cols),
                    T::zero(),
                    &mut oi[oy0 * wo..],
                    how,
                );
                oy0 = oy1;
            }
        }
        if let Some(b) = bias {
            for (o, &bv) in oi.chunks_mut(how).zip(b) {
                for v in o {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv2d_forward`]. Accumulates into `dweight`/`dbias`
/// and returns the input gradient when `need_input_grad` is set.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    g: &ConvGeometry,
    dweight: &mut [T],
    dbias: Option<&mut [T]>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let [n, _, h, w] = x.shape();
    let [_, cout, ho, wo] = dy.shape();
    let how = ho * wo;
    let kk = g.col_rows();
    let wmat = MatRef::new(weight, kk);
    let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
    let tile = g.tile_rows(wo);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * tile.min(ho) * wo]
    };
    let mut dcol = col.clone();
    for i in 0..n {
        let xi = x.item(i);
        let dyi = dy.item(i);
        if g.is_pointwise() {
            gemm(cout, how, kk, T::one(), MatRef::new(dyi, how), MatRef::new(xi, how).t(), T::one(), dweight, kk);
            if let Some(dx) = dx.as_mut() {
                gemm(kk, cout, how, T::one(), wmat.t(), MatRef::new(dyi, how), T::zero(), dx.item_mut(i), how);
            }
            continue;
        }
        let mut oy0 = 0;
        while oy0 < ho {
            let oy1 = (oy0 + tile).min(ho);
            let cols = (oy1 - oy0) * wo;
            im2col(xi, h, w, g, oy0, oy1, wo, &mut col[..kk * cols]);
            let dy_tile = MatRef::new(&dyi[oy0 * wo..], how);
            gemm(cout, cols, kk, T::one(), dy_tile, MatRef::new(&col[..kk * cols], cols).t(), T::one(), dweight, kk);
            if let Some(dx) = dx.as_mut() {
                gemm(kk, cout, cols, T::one(), wmat.t(), dy_tile, T::zero(), &mut dcol[..kk * cols], cols);
                col2im(&dcol[..kk * cols], h, w, g, oy0, oy1, wo, dx.item_mut(i));
            }
            oy0 = oy1;
        }
    }
    if let Some(db) = dbias {
        for i in 0..n {
            for (b, plane) in db.iter_mut().zip(dy.item(i).chunks(how)) {
                *b += plane.iter().copied().sum::<T>();
            }
        }
    }
    dx
}

/// Same-size depthwise convolution (stride 1, padding `dilation * (k-1)/2`).
/// `weight` is `[channels, k * k]`.
pub fn depthwise_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    bias: &[T],
    kernel: usize,
    dilation: usize,
) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let pad = dilation * (kernel - 1) / 2;
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let wk = &weight[ch * kernel * kernel..(ch + 1) * kernel * kernel];
            let dst = out.plane_mut(i, ch);
            dst.fill(bias[ch]);
            for ky in 0..kernel {
                let dy = (ky * dilation) as isize - pad as isize;
                let (y0, y1) = shifted_range(h, dy);
                for kx in 0..kernel {
                    let dx = (kx * dilation) as isize - pad as isize;
                    let (x0, x1) = shifted_range(w, dx);
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = wk[ky * kernel + kx];
                    for oy in y0..y1 {
                        let iy = (oy as isize + dy) as usize;
                        let s = &src[iy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                        let d = &mut dst[oy * w + x0..oy * w + x1];
                        for (o, &v) in d.iter_mut().zip(s) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    kernel: usize,
    dilation: usize,
    dweight: &mut [T],
    dbias: &mut [T],
) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let pad = dilation * (kernel - 1) / 2;
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let g = dy.plane(i, ch);
            dbias[ch] += g.iter().copied().sum::<T>();
            let wk = &weight[ch * kernel * kernel..(ch + 1) * kernel * kernel];
            let dwk = &mut dweight[ch * kernel * kernel..(ch + 1) * kernel * kernel];
            let dst = dx.plane_mut(i, ch);
            for ky in 0..kernel {
                let oyoff = (ky * dilation) as isize - pad as isize;
                let (y0, y1) = shifted_range(h, oyoff);
                for kx in 0..kernel {
                    let oxoff = (kx * dilation) as isize - pad as isize;
                    let (x0, x1) = shifted_range(w, oxoff);
                    if x0 >= x1 {
                        continue;
                    }
                    let wv = wk[ky * kernel + kx];
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = (oy as isize + oyoff) as usize;
                        let base = iy * w + (x0 as isize + oxoff) as usize;
                        let gs = &g[oy * w + x0..oy * w + x1];
                        let xs = &src[base..base + (x1 - x0)];
                        acc += gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>();
                        let ds = &mut dst[base..base + (x1 - x0)];
                        for (d, &gv) in ds.iter_mut().zip(gs) {
                            *d += wv * gv;
                        }
                    }
                    dwk[ky * kernel + kx] += acc;
                }
            }
        }
    }
    dx
}

/// Output indices `o` in `[0, len)` for which `o + shift` is also in `[0, len)`.
fn shifted_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, wt: &[f64], b: &[f64], g: &ConvGeometry) -> Tensor<f64> {
        let [n, _, h, w] = x.shape();
        let (ho, wo) = g.output_size(h, w);
        let k = g.kernel;
        let mut out = Tensor::zeros([n, g.out_channels, ho, wo]);
        for i in 0..n {
            for co in 0..g.out_channels {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..g.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += wt[((co * g.in_channels + ci) * k + ky) * k + kx]
                                        * x.plane(i, ci)[iy as usize * w + ix as usize];
                                }
                            }
                        }
                        out.plane_mut(i, co)[oy * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 7919 % 101) as f64 / 50.0 - 1.0) * scale).collect()
    }

    #[test]
    fn dense_conv_matches_naive_loops() {
        for &(k, s, p, d) in &[(3, 1, 1, 1), (3, 1, 2, 2), (2, 2, 0, 1), (1, 1, 0, 1), (7, 1, 3, 1), (3, 2, 1, 1)] {
            let g = ConvGeometry {
                in_channels: 3,
                out_channels: 4,
                kernel: k,
                stride: s,
                padding: p,
                dilation: d,
            };
            let x = Tensor::from_vec([2, 3, 6, 8], seq(2 * 3 * 48, 1.0));
            let wt = seq(4 * 3 * k * k, 0.5);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let fast = conv2d_forward(&x, &wt, Some(&b), &g);
            let slow = naive_conv(&x, &wt, &b, &g);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p} d={d}");
            }
        }
    }

    #[test]
    fn dense_conv_backward_is_adjoint() {
        // <conv(x), dy> = <x, conv^T(dy)> and the weight gradient is linear in x.
        let g = ConvGeometry {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 1,
            padding: 2,
            dilation: 2,
        };
        let x = Tensor::from_vec([1, 2, 5, 7], seq(70, 1.0));
        let wt = seq(3 * 2 * 9, 0.3);
        let y = conv2d_forward(&x, &wt, None, &g);
        let dy = Tensor::from_vec(y.shape(), seq(y.len(), 0.7).into_iter().rev().collect());
        let mut dw = vec![0.0; wt.len()];
        let dx = conv2d_backward(&x, &wt, &dy, &g, &mut dw, None, true).unwrap();
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let rhs_w: f64 = wt.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn depthwise_matches_dense_with_block_diagonal_weights() {
        let c = 3;
        let k = 7;
        for &d in &[1, 2] {
            let x = Tensor::from_vec([1, c, 9, 11], seq(c * 99, 1.0));
            let wt = seq(c * k * k, 0.2);
            let b = vec![0.5, -0.5, 0.25];
            let mut dense = vec![0.0; c * c * k * k];
            for ch in 0..c {
                dense[(ch * c + ch) * k * k..(ch * c + ch + 1) * k * k]
                    .copy_from_slice(&wt[ch * k * k..(ch + 1) * k * k]);
            }
            let g = ConvGeometry {
                in_channels: c,
                out_channels: c,
                kernel: k,
                stride: 1,
                padding: d * 3,
                dilation: d,
            };
            let a = depthwise_forward(&x, &wt, &b, k, d);
            let e = naive_conv(&x, &dense, &b, &g);
            for (p, q) in a.data().iter().zip(e.data()) {
                assert!((p - q).abs() < 1e-12);
            }
            let dy = Tensor::from_vec(a.shape(), seq(a.len(), 0.9));
            let mut dw = vec![0.0; wt.len()];
            let mut db = vec![0.0; c];
            let dx = depthwise_backward(&x, &wt, &dy, k, d, &mut dw, &mut db);
            let mut dwd = vec![0.0; dense.len()];
            let mut dbd = vec![0.0; c];
            let dxd = conv2d_backward(&x, &dense, &dy, &g, &mut dwd, Some(&mut dbd), true).unwrap();
            for (p, q) in dx.data().iter().zip(dxd.data()) {
                assert!((p - q).abs() < 1e-10);
            }
            for ch in 0..c {
                for t in 0..k * k {
                    assert!((dw[ch * k * k + t] - dwd[(ch * c + ch) * k * k + t]).abs() < 1e-10);
                }
                assert!((db[ch] - dbd[ch]).abs() < 1e-10);
            }
        }
    }
}
