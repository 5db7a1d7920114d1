//! Bilinear x2 upsampling with half-pixel centers (the `align_corners = false`
//! convention).

use crate::tensor::{Scalar, Tensor};

/// For each output index: (low source index, high source index, high weight).
fn taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample2x_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let ty = taps(h);
    let tx: Vec<(usize, usize, T, T)> = taps(w)
        .into_iter()
        .map(|(a, b, l)| (a, b, T::from_f64(1.0 - l), T::from_f64(l)))
        .collect();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut row0 = vec![T::zero(); wo];
    let mut row1 = vec![T::zero(); wo];
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let (wy0, wy1) = (T::from_f64(1.0 - ly), T::from_f64(ly));
                for (r, yy) in [(&mut row0, y0), (&mut row1, y1)] {
                    let s = &src[yy * w..(yy + 1) * w];
                    for (v, &(a, b, wa, wb)) in r.iter_mut().zip(&tx) {
                        *v = wa * s[a] + wb * s[b];
                    }
                }
                let d = &mut dst[oy * wo..(oy + 1) * wo];
                for ((v, &a), &b) in d.iter_mut().zip(&row0).zip(&row1) {
                    *v = wy0 * a + wy1 * b;
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x_forward`].
pub fn upsample2x_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, ho, wo] = dy.shape();
    let (h, w) = (ho / 2, wo / 2);
    let ty = taps(h);
    let tx: Vec<(usize, usize, T, T)> = taps(w)
        .into_iter()
        .map(|(a, b, l)| (a, b, T::from_f64(1.0 - l), T::from_f64(l)))
        .collect();
    let mut dx = Tensor::zeros([n, c, h, w]);
    let mut row = vec![T::zero(); w];
    for i in 0..n {
        for ch in 0..c {
            let g = dy.plane(i, ch);
            let dst = dx.plane_mut(i, ch);
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                row.fill(T::zero());
                for (&gv, &(a, b, wa, wb)) in g[oy * wo..(oy + 1) * wo].iter().zip(&tx) {
                    row[a] += wa * gv;
                    row[b] += wb * gv;
                }
                let (wy0, wy1) = (T::from_f64(1.0 - ly), T::from_f64(ly));
                for (x, &r) in row.iter().enumerate() {
                    dst[y0 * w + x] += wy0 * r;
                    dst[y1 * w + x] += wy1 * r;
                }
            }
        }
    }
    dx
}
