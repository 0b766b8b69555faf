//! Tensor primitives with explicit forward/adjoint pairs.
//!
//! Every operator here is a pure function of its inputs; the `*_bwd`
//! companions propagate an upstream gradient and are verified against
//! central finite differences in the unit tests below.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2};

use crate::num::Scalar;
use crate::tensor::{matmul, Plane};

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Unrolls `x` into a `(cin*k*k, ho*wo)` matrix for gemm-based convolution.
fn im2col<T: Scalar>(x: &Plane<T>, k: usize, stride: usize, pad: usize) -> Array2<T> {
    let (cin, h, w) = x.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut col = Array2::<T>::zeros((cin * k * k, ho * wo));
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = col.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add of a column matrix back onto the input grid.
fn col2im<T: Scalar>(
    col: &Array2<T>,
    dim: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Plane<T> {
    let (cin, h, w) = dim;
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut x = Array3::<T>::zeros(dim);
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = col.row(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ci, iy as usize, ix as usize)] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

/// `y = w * x + b` with `w: (cout, cin, k, k)`.
pub fn conv2d<T: Scalar>(
    x: &Plane<T>,
    w: &Array4<T>,
    b: &Array1<T>,
    stride: usize,
    pad: usize,
) -> Plane<T> {
    let (cout, cin, k, _) = w.dim();
    debug_assert_eq!(cin, x.dim().0, "conv2d input channels");
    let ho = conv_out_size(x.dim().1, k, stride, pad);
    let wo = conv_out_size(x.dim().2, k, stride, pad);
    let col = im2col(x, k, stride, pad);
    let wm = w.view().into_shape_with_order((cout, cin * k * k)).unwrap();
    let mut y = matmul(wm, col.view());
    for (mut row, &bias) in y.rows_mut().into_iter().zip(b.iter()) {
        row.mapv_inplace(|v| v + bias);
    }
    y.into_shape_with_order((cout, ho, wo)).unwrap()
}

/// Returns `(dx, dw, db)` for the convolution above.
pub fn conv2d_bwd<T: Scalar>(
    x: &Plane<T>,
    w: &Array4<T>,
    dy: &Plane<T>,
    stride: usize,
    pad: usize,
) -> (Plane<T>, Array4<T>, Array1<T>) {
    let (cout, cin, k, _) = w.dim();
    let (_, ho, wo) = dy.dim();
    let dy_m = dy.view().into_shape_with_order((cout, ho * wo)).unwrap();
    let col = im2col(x, k, stride, pad);
    let dw = matmul(dy_m, col.t())
        .into_shape_with_order((cout, cin, k, k))
        .unwrap();
    let db = Array1::from_iter(dy_m.rows().into_iter().map(|r| r.sum()));
    let wm = w.view().into_shape_with_order((cout, cin * k * k)).unwrap();
    let dcol = matmul(wm.t(), dy_m);
    let dx = col2im(&dcol, x.dim(), k, stride, pad);
    (dx, dw, db)
}

/// Depthwise 3x3 convolution, stride 1, pad 1. `w: (c, 3, 3)`.
pub fn dwconv3<T: Scalar>(x: &Plane<T>, w: &Plane<T>, b: &Array1<T>) -> Plane<T> {
    let (c, h, wd) = x.dim();
    let mut y = Array3::<T>::zeros((c, h, wd));
    for ci in 0..c {
        for oy in 0..h {
            for ox in 0..wd {
                let mut acc = b[ci];
                for ky in 0..3usize {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix = ox as isize + kx as isize - 1;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        acc += w[(ci, ky, kx)] * x[(ci, iy as usize, ix as usize)];
                    }
                }
                y[(ci, oy, ox)] = acc;
            }
        }
    }
    y
}

pub fn dwconv3_bwd<T: Scalar>(
    x: &Plane<T>,
    w: &Plane<T>,
    dy: &Plane<T>,
) -> (Plane<T>, Plane<T>, Array1<T>) {
    let (c, h, wd) = x.dim();
    let mut dx = Array3::<T>::zeros((c, h, wd));
    let mut dw = Array3::<T>::zeros((c, 3, 3));
    let mut db = Array1::<T>::zeros(c);
    for ci in 0..c {
        for oy in 0..h {
            for ox in 0..wd {
                let g = dy[(ci, oy, ox)];
                db[ci] += g;
                for ky in 0..3usize {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3usize {
                        let ix = ox as isize + kx as isize - 1;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        dw[(ci, ky, kx)] += g * x[(ci, iy as usize, ix as usize)];
                        dx[(ci, iy as usize, ix as usize)] += g * w[(ci, ky, kx)];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// dense / linear
// ---------------------------------------------------------------------------

/// `y = W x + b`, `W: (out, in)`.
pub fn linear<T: Scalar>(x: ArrayView1<T>, w: ArrayView2<T>, b: ArrayView1<T>) -> Array1<T> {
    let mut y = w.dot(&x);
    y += &b;
    y
}

pub fn linear_bwd<T: Scalar>(
    x: ArrayView1<T>,
    w: ArrayView2<T>,
    dy: ArrayView1<T>,
) -> (Array1<T>, Array2<T>, Array1<T>) {
    let dx = w.t().dot(&dy);
    let n = dy.len();
    let m = x.len();
    let mut dw = Array2::<T>::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            dw[(i, j)] = dy[i] * x[j];
        }
    }
    (dx, dw, dy.to_owned())
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    Relu,
    /// Negative-side slope.
    Leaky(f64),
    Gelu,
    Sigmoid,
}

pub fn act_fwd<T: Scalar, D: ndarray::Dimension>(
    a: Act,
    x: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    match a {
        Act::Relu => x.mapv(|v| if v > T::zero() { v } else { T::zero() }),
        Act::Leaky(s) => {
            let s = T::f(s);
            x.mapv(|v| if v > T::zero() { v } else { v * s })
        }
        Act::Gelu => x.mapv(gelu),
        Act::Sigmoid => x.mapv(sigmoid),
    }
}

/// Gradients are computed from the pre-activation input.
pub fn act_bwd<T: Scalar, D: ndarray::Dimension>(
    a: Act,
    x: &ndarray::Array<T, D>,
    dy: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut dx = dy.clone();
    match a {
        Act::Relu => {
            ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
                if v <= T::zero() {
                    *d = T::zero();
                }
            });
        }
        Act::Leaky(s) => {
            let s = T::f(s);
            ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
                if v <= T::zero() {
                    *d *= s;
                }
            });
        }
        Act::Gelu => {
            ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
                *d *= gelu_grad(v);
            });
        }
        Act::Sigmoid => {
            ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
                let sg = sigmoid(v);
                *d *= sg * (T::one() - sg);
            });
        }
    }
    dx
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Scalar>(v: T) -> T {
    let c = T::f(GELU_C);
    let k = T::f(0.044715);
    let u = c * (v + k * v * v * v);
    T::f(0.5) * v * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(v: T) -> T {
    let c = T::f(GELU_C);
    let k = T::f(0.044715);
    let u = c * (v + k * v * v * v);
    let t = u.tanh();
    let du = c * (T::one() + T::f(3.0) * k * v * v);
    T::f(0.5) * (T::one() + t) + T::f(0.5) * v * (T::one() - t * t) * du
}

/// `exp(clamp(x, lo, hi))`; the clamp keeps the multiplicative coupling term
/// bounded. Gradient is zero outside the clamp window.
pub fn exp_clamped<T: Scalar>(x: &Plane<T>, lo: f64, hi: f64) -> Plane<T> {
    let (lo, hi) = (T::f(lo), T::f(hi));
    x.mapv(|v| v.max(lo).min(hi).exp())
}

pub fn exp_clamped_bwd<T: Scalar>(x: &Plane<T>, dy: &Plane<T>, lo: f64, hi: f64) -> Plane<T> {
    let (lo, hi) = (T::f(lo), T::f(hi));
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        if v < lo || v > hi {
            *d = T::zero();
        } else {
            *d *= v.exp();
        }
    });
    dx
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

pub const LN_EPS: f64 = 1e-6;

/// Layer normalization across channels at each spatial position.
pub fn layer_norm_c<T: Scalar>(x: &Plane<T>, gamma: &Array1<T>, beta: &Array1<T>) -> Plane<T> {
    let (c, h, w) = x.dim();
    let eps = T::f(LN_EPS);
    let nc = T::f(c as f64);
    let mut y = Array3::<T>::zeros((c, h, w));
    for iy in 0..h {
        for ix in 0..w {
            let mut mu = T::zero();
            for ci in 0..c {
                mu += x[(ci, iy, ix)];
            }
            mu /= nc;
            let mut var = T::zero();
            for ci in 0..c {
                let d = x[(ci, iy, ix)] - mu;
                var += d * d;
            }
            var /= nc;
            let inv = T::one() / (var + eps).sqrt();
            for ci in 0..c {
                y[(ci, iy, ix)] = (x[(ci, iy, ix)] - mu) * inv * gamma[ci] + beta[ci];
            }
        }
    }
    y
}

pub fn layer_norm_c_bwd<T: Scalar>(
    x: &Plane<T>,
    gamma: &Array1<T>,
    dy: &Plane<T>,
) -> (Plane<T>, Array1<T>, Array1<T>) {
    let (c, h, w) = x.dim();
    let eps = T::f(LN_EPS);
    let nc = T::f(c as f64);
    let mut dx = Array3::<T>::zeros((c, h, w));
    let mut dg = Array1::<T>::zeros(c);
    let mut db = Array1::<T>::zeros(c);
    for iy in 0..h {
        for ix in 0..w {
            let mut mu = T::zero();
            for ci in 0..c {
                mu += x[(ci, iy, ix)];
            }
            mu /= nc;
            let mut var = T::zero();
            for ci in 0..c {
                let d = x[(ci, iy, ix)] - mu;
                var += d * d;
            }
            var /= nc;
            let inv = T::one() / (var + eps).sqrt();

            // accumulate parameter grads and the two reduction terms
            let mut sum_dxh = T::zero();
            let mut sum_dxh_xh = T::zero();
            for ci in 0..c {
                let xh = (x[(ci, iy, ix)] - mu) * inv;
                let g = dy[(ci, iy, ix)];
                dg[ci] += g * xh;
                db[ci] += g;
                let dxh = g * gamma[ci];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
            }
            for ci in 0..c {
                let xh = (x[(ci, iy, ix)] - mu) * inv;
                let dxh = dy[(ci, iy, ix)] * gamma[ci];
                dx[(ci, iy, ix)] = inv * (dxh - sum_dxh / nc - xh * sum_dxh_xh / nc);
            }
        }
    }
    (dx, dg, db)
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

pub fn softmax<T: Scalar>(x: ArrayView1<T>) -> Array1<T> {
    let m = x.iter().cloned().fold(T::neg_infinity(), T::max);
    let e = x.mapv(|v| (v - m).exp());
    let sum = e.sum();
    e.mapv(|v| v / sum)
}

pub fn softmax_bwd<T: Scalar>(y: ArrayView1<T>, dy: ArrayView1<T>) -> Array1<T> {
    let dot: T = y.iter().zip(dy.iter()).map(|(&a, &b)| a * b).sum();
    Array1::from_iter(y.iter().zip(dy.iter()).map(|(&yi, &gi)| yi * (gi - dot)))
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

/// Global average pool to one value per channel.
pub fn gap<T: Scalar>(x: &Plane<T>) -> Array1<T> {
    let (c, h, w) = x.dim();
    let n = T::f((h * w) as f64);
    Array1::from_iter((0..c).map(|ci| x.slice(s![ci, .., ..]).sum() / n))
}

pub fn gap_bwd<T: Scalar>(dim: (usize, usize, usize), dy: ArrayView1<T>) -> Plane<T> {
    let (c, h, w) = dim;
    let n = T::f((h * w) as f64);
    let mut dx = Array3::<T>::zeros(dim);
    for ci in 0..c {
        let g = dy[ci] / n;
        dx.slice_mut(s![ci, .., ..]).fill(g);
    }
    dx
}

pub fn upsample_nearest2<T: Scalar>(x: &Plane<T>) -> Plane<T> {
    let (c, h, w) = x.dim();
    let mut y = Array3::<T>::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                let v = x[(ci, iy, ix)];
                y[(ci, 2 * iy, 2 * ix)] = v;
                y[(ci, 2 * iy, 2 * ix + 1)] = v;
                y[(ci, 2 * iy + 1, 2 * ix)] = v;
                y[(ci, 2 * iy + 1, 2 * ix + 1)] = v;
            }
        }
    }
    y
}

pub fn upsample_nearest2_bwd<T: Scalar>(dy: &Plane<T>) -> Plane<T> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                dx[(ci, iy, ix)] = dy[(ci, 2 * iy, 2 * ix)]
                    + dy[(ci, 2 * iy, 2 * ix + 1)]
                    + dy[(ci, 2 * iy + 1, 2 * ix)]
                    + dy[(ci, 2 * iy + 1, 2 * ix + 1)];
            }
        }
    }
    dx
}

/// Mean over non-overlapping 2x2 cells.
pub fn avgpool2<T: Scalar>(x: &Plane<T>) -> Plane<T> {
    let (c, h, w) = x.dim();
    let q = T::f(0.25);
    let mut y = Array3::<T>::zeros((c, h / 2, w / 2));
    for ci in 0..c {
        for iy in 0..h / 2 {
            for ix in 0..w / 2 {
                y[(ci, iy, ix)] = (x[(ci, 2 * iy, 2 * ix)]
                    + x[(ci, 2 * iy, 2 * ix + 1)]
                    + x[(ci, 2 * iy + 1, 2 * ix)]
                    + x[(ci, 2 * iy + 1, 2 * ix + 1)])
                    * q;
            }
        }
    }
    y
}

pub fn avgpool2_bwd<T: Scalar>(dy: &Plane<T>) -> Plane<T> {
    let (c, h, w) = dy.dim();
    let q = T::f(0.25);
    let mut dx = Array3::<T>::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for iy in 0..h {
            for ix in 0..w {
                let g = dy[(ci, iy, ix)] * q;
                dx[(ci, 2 * iy, 2 * ix)] = g;
                dx[(ci, 2 * iy, 2 * ix + 1)] = g;
                dx[(ci, 2 * iy + 1, 2 * ix)] = g;
                dx[(ci, 2 * iy + 1, 2 * ix + 1)] = g;
            }
        }
    }
    dx
}

/// Per-axis sample positions for half-pixel-centered bilinear resampling.
fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            let pos = (o as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
            let pos = pos.clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub fn bilinear_resize<T: Scalar>(x: &Plane<T>, ho: usize, wo: usize) -> Plane<T> {
    let (c, h, w) = x.dim();
    let ys = bilinear_axis(h, ho);
    let xs = bilinear_axis(w, wo);
    let mut y = Array3::<T>::zeros((c, ho, wo));
    for ci in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let (fy0, fy1) = (T::f(1.0 - fy), T::f(fy));
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let (fx0, fx1) = (T::f(1.0 - fx), T::f(fx));
                y[(ci, oy, ox)] = x[(ci, y0, x0)] * fy0 * fx0
                    + x[(ci, y0, x1)] * fy0 * fx1
                    + x[(ci, y1, x0)] * fy1 * fx0
                    + x[(ci, y1, x1)] * fy1 * fx1;
            }
        }
    }
    y
}

pub fn bilinear_resize_bwd<T: Scalar>(
    dim: (usize, usize, usize),
    dy: &Plane<T>,
) -> Plane<T> {
    let (c, h, w) = dim;
    let (_, ho, wo) = dy.dim();
    let ys = bilinear_axis(h, ho);
    let xs = bilinear_axis(w, wo);
    let mut dx = Array3::<T>::zeros(dim);
    for ci in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let (fy0, fy1) = (T::f(1.0 - fy), T::f(fy));
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let (fx0, fx1) = (T::f(1.0 - fx), T::f(fx));
                let g = dy[(ci, oy, ox)];
                dx[(ci, y0, x0)] += g * fy0 * fx0;
                dx[(ci, y0, x1)] += g * fy0 * fx1;
                dx[(ci, y1, x0)] += g * fy1 * fx0;
                dx[(ci, y1, x1)] += g * fy1 * fx1;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// channel concat / split
// ---------------------------------------------------------------------------

pub fn concat_c<T: Scalar>(parts: &[&Plane<T>]) -> Plane<T> {
    let (_, h, w) = parts[0].dim();
    let c_total: usize = parts.iter().map(|p| p.dim().0).sum();
    let mut y = Array3::<T>::zeros((c_total, h, w));
    let mut at = 0;
    for p in parts {
        let c = p.dim().0;
        y.slice_mut(s![at..at + c, .., ..]).assign(p);
        at += c;
    }
    y
}

pub fn split_c<T: Scalar>(x: &Plane<T>, sizes: &[usize]) -> Vec<Plane<T>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &c in sizes {
        out.push(x.slice(s![at..at + c, .., ..]).to_owned());
        at += c;
    }
    out
}

// ---------------------------------------------------------------------------
// symmetric padding (mirror including the edge sample)
// ---------------------------------------------------------------------------

pub fn pad_symmetric<T: Scalar>(x: &Plane<T>, bottom: usize, right: usize) -> Plane<T> {
    let (c, h, w) = x.dim();
    let (h2, w2) = (h + bottom, w + right);
    let mut y = Array3::<T>::zeros((c, h2, w2));
    for ci in 0..c {
        for iy in 0..h2 {
            let sy = mirror_index(iy, h);
            for ix in 0..w2 {
                let sx = mirror_index(ix, w);
                y[(ci, iy, ix)] = x[(ci, sy, sx)];
            }
        }
    }
    y
}

pub fn pad_symmetric_bwd<T: Scalar>(dim: (usize, usize, usize), dy: &Plane<T>) -> Plane<T> {
    let (c, h, w) = dim;
    let (_, h2, w2) = dy.dim();
    let mut dx = Array3::<T>::zeros(dim);
    for ci in 0..c {
        for iy in 0..h2 {
            let sy = mirror_index(iy, h);
            for ix in 0..w2 {
                let sx = mirror_index(ix, w);
                dx[(ci, sy, sx)] += dy[(ci, iy, ix)];
            }
        }
    }
    dx
}

fn mirror_index(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        // symmetric reflection: n-1, n-2, ... (indices past 2n-1 never occur
        // for the pad sizes used here)
        2 * n - 1 - i
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::randn3;

    /// Central finite-difference check of `d loss / d input` where
    /// `loss = sum(weights .* f(x))`.
    fn fd_check_input<F>(x: &Plane<f64>, weights: &ArrayD<f64>, f: F, analytic: &Plane<f64>, tol: f64)
    where
        F: Fn(&Plane<f64>) -> ArrayD<f64>,
    {
        let h = 1e-6;
        let mut worst = 0.0f64;
        for idx in ndarray::indices(x.dim()) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let lp = (f(&xp) * weights).sum();
            let lm = (f(&xm) * weights).sum();
            let fd = (lp - lm) / (2.0 * h);
            let an = analytic[idx];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < tol, "worst input-grad rel err {worst}");
    }

    fn randd(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), crate::tensor::randn_vec(rng, n, 1.0)).unwrap()
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Plane<f64> = randn3(&mut rng, (3, 5, 5), 1.0);
        let w = Array4::from_shape_vec(
            (4, 3, 3, 3),
            crate::tensor::randn_vec(&mut rng, 4 * 3 * 3 * 3, 0.5),
        )
        .unwrap();
        let b = Array1::from_vec(crate::tensor::randn_vec(&mut rng, 4, 0.5));
        let dy_w = randd(&mut rng, &[4, 3, 3]); // stride 2, pad 1 -> 3x3 out
        let dy = dy_w.clone().into_dimensionality::<ndarray::Ix3>().unwrap();

        let (dx, dw, db) = conv2d_bwd(&x, &w, &dy, 2, 1);
        fd_check_input(
            &x,
            &dy_w,
            |x| conv2d(x, &w, &b, 2, 1).into_dyn(),
            &dx,
            1e-5,
        );

        // weight gradient: spot-check every coordinate by FD
        let h = 1e-6;
        for idx in ndarray::indices(w.dim()) {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let lp = (conv2d(&x, &wp, &b, 2, 1).into_dyn() * &dy_w).sum();
            let lm = (conv2d(&x, &wm, &b, 2, 1).into_dyn() * &dy_w).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - dw[idx]).abs() < 1e-5);
        }
        for i in 0..4 {
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let lp = (conv2d(&x, &w, &bp, 2, 1).into_dyn() * &dy_w).sum();
            let lm = (conv2d(&x, &w, &bm, 2, 1).into_dyn() * &dy_w).sum();
            assert!(((lp - lm) / (2.0 * h) - db[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn dwconv3_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Plane<f64> = randn3(&mut rng, (2, 4, 4), 1.0);
        let w: Plane<f64> = randn3(&mut rng, (2, 3, 3), 0.7);
        let b = Array1::from_vec(crate::tensor::randn_vec(&mut rng, 2, 0.3));
        let dy_w = randd(&mut rng, &[2, 4, 4]);
        let dy = dy_w.clone().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (dx, dw, _db) = dwconv3_bwd(&x, &w, &dy);
        fd_check_input(&x, &dy_w, |x| dwconv3(x, &w, &b).into_dyn(), &dx, 1e-5);
        let h = 1e-6;
        for idx in ndarray::indices(w.dim()) {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let lp = (dwconv3(&x, &wp, &b).into_dyn() * &dy_w).sum();
            let lm = (dwconv3(&x, &wm, &b).into_dyn() * &dy_w).sum();
            assert!(((lp - lm) / (2.0 * h) - dw[idx]).abs() < 1e-5);
        }
    }

    #[test]
    fn activations_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for act in [Act::Relu, Act::Leaky(0.2), Act::Gelu, Act::Sigmoid] {
            let x: Plane<f64> = randn3(&mut rng, (2, 3, 3), 1.3);
            let dy_w = randd(&mut rng, &[2, 3, 3]);
            let dy = dy_w.clone().into_dimensionality::<ndarray::Ix3>().unwrap();
            let dx = act_bwd(act, &x, &dy);
            fd_check_input(&x, &dy_w, |x| act_fwd(act, x).into_dyn(), &dx, 1e-4);
        }
    }

    #[test]
    fn exp_clamp_matches_finite_differences_inside_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Plane<f64> = randn3(&mut rng, (2, 3, 3), 0.5);
        let dy_w = randd(&mut rng, &[2, 3, 3]);
        let dy = dy_w.clone().into_dimensionality::<ndarray::Ix3>().unwrap();
        let dx = exp_clamped_bwd(&x, &dy, -2.0, 2.0);
        fd_check_input(&x, &dy_w, |x| exp_clamped(x, -2.0, 2.0).into_dyn(), &dx, 1e-5);
        // saturated side has zero gradient
        let far = Array3::from_elem((1, 1, 1), 5.0);
        let g = exp_clamped_bwd(&far, &Array3::from_elem((1, 1, 1), 1.0), -2.0, 2.0);
        assert_eq!(g[(0, 0, 0)], 0.0);
    }

    #[test]
    fn layer_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Plane<f64> = randn3(&mut rng, (6, 2, 2), 1.0);
        let gamma = Array1::from_vec(crate::tensor::randn_vec(&mut rng, 6, 0.5));
        let beta = Array1::from_vec(crate::tensor::randn_vec(&mut rng, 6, 0.5));
        let dy_w = randd(&mut rng, &[6, 2, 2]);
        let dy = dy_w.clone().into_dimensionality::<ndarray::Ix3>().unwrap();
        let (dx, dg, db) = layer_norm_c_bwd(&x, &gamma, &dy);
        fd_check_input(
            &x,
            &dy_w,
            |x| layer_norm_c(x, &gamma, &beta).into_dyn(),
            &dx,
            1e-4,
        );
        let h = 1e-6;
        for i in 0..6 {
            let mut gp = gamma.clone();
            gp[i] += h;
            let mut gm = gamma.clone();
            gm[i] -= h;
            let lp = (layer_norm_c(&x, &gp, &beta).into_dyn() * &dy_w).sum();
            let lm = (layer_norm_c(&x, &gm, &beta).into_dyn() * &dy_w).sum();
            assert!(((lp - lm) / (2.0 * h) - dg[i]).abs() < 1e-5);
            let mut bp = beta.clone();
            bp[i] += h;
            let mut bm = beta.clone();
            bm[i] -= h;
            let lp = (layer_norm_c(&x, &gamma, &bp).into_dyn() * &dy_w).sum();
            let lm = (layer_norm_c(&x, &gamma, &bm).into_dyn() * &dy_w).sum();
            assert!(((lp - lm) / (2.0 * h) - db[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_props_and_grad() {
        let x = Array1::from_vec(vec![0.3, -1.2, 2.0, 0.0]);
        let y = softmax(x.view());
        assert!((y.sum() - 1.0f64).abs() < 1e-12);
        let dy = Array1::from_vec(vec![1.0, -0.5, 0.25, 2.0]);
        let dx = softmax_bwd(y.view(), dy.view());
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let lp = (softmax(xp.view()) * &dy).sum();
            let lm = (softmax(xm.view()) * &dy).sum();
            assert!(((lp - lm) / (2.0 * h) - dx[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_adjoints_are_transposes() {
        // <A x, y> == <x, A^T y> for the linear resampling operators
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Plane<f64> = randn3(&mut rng, (3, 6, 6), 1.0);

        let y: Plane<f64> = randn3(&mut rng, (3, 12, 12), 1.0);
        let lhs = (&upsample_nearest2(&x) * &y).sum();
        let rhs = (&x * &upsample_nearest2_bwd(&y)).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let y2: Plane<f64> = randn3(&mut rng, (3, 3, 3), 1.0);
        let lhs = (&avgpool2(&x) * &y2).sum();
        let rhs = (&x * &avgpool2_bwd(&y2)).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let y3: Plane<f64> = randn3(&mut rng, (3, 9, 5), 1.0);
        let lhs = (&bilinear_resize(&x, 9, 5) * &y3).sum();
        let rhs = (&x * &bilinear_resize_bwd((3, 6, 6), &y3)).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let y4: Plane<f64> = randn3(&mut rng, (3, 8, 7), 1.0);
        let lhs = (&pad_symmetric(&x, 2, 1) * &y4).sum();
        let rhs = (&x * &pad_symmetric_bwd((3, 6, 6), &y4)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn linear_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array1::from_vec(crate::tensor::randn_vec::<f64, _>(&mut rng, 5, 1.0));
        let w = Array2::from_shape_vec((3, 5), crate::tensor::randn_vec(&mut rng, 15, 0.7)).unwrap();
        let b = Array1::from_vec(crate::tensor::randn_vec(&mut rng, 3, 0.3));
        let dy = Array1::from_vec(crate::tensor::randn_vec(&mut rng, 3, 1.0));
        let (dx, dw, db) = linear_bwd(x.view(), w.view(), dy.view());
        let h = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let lp = (linear(xp.view(), w.view(), b.view()) * &dy).sum();
            let lm = (linear(xm.view(), w.view(), b.view()) * &dy).sum();
            assert!(((lp - lm) / (2.0 * h) - dx[i]).abs() < 1e-7);
        }
        for idx in ndarray::indices(w.dim()) {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let lp = (linear(x.view(), wp.view(), b.view()) * &dy).sum();
            let lm = (linear(x.view(), wm.view(), b.view()) * &dy).sum();
            assert!(((lp - lm) / (2.0 * h) - dw[idx]).abs() < 1e-7);
        }
        assert_eq!(db, dy);
    }

    #[test]
    fn gap_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Plane<f64> = randn3(&mut rng, (4, 3, 3), 1.0);
        let y = gap(&x);
        assert_eq!(y.len(), 4);
        let dy = Array1::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let dx: Plane<f64> = gap_bwd((4, 3, 3), dy.view());
        assert!((dx[(1, 0, 0)] - 2.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Plane<f64> = randn3(&mut rng, (2, 3, 3), 1.0);
        let b: Plane<f64> = randn3(&mut rng, (5, 3, 3), 1.0);
        let cat = concat_c(&[&a, &b]);
        let parts = split_c(&cat, &[2, 5]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
