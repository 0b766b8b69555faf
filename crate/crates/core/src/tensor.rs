//! Small tensor helpers shared across the crate.
//!
//! Activations and images are `ndarray` arrays in channel-major layout:
//! an image plane is `(C, H, W)` with values nominally in `[0, 1]`.

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::num::Scalar;

/// `(C, H, W)` real-valued image or feature map.
pub type Plane<T> = Array3<T>;

/// Matrix product `a @ b` through the tuned gemm backend.
pub fn matmul<T: Scalar>(a: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let (m, _) = a.dim();
    let (_, n) = b.dim();
    let mut out = Array2::<T>::zeros((m, n));
    general_mat_mul(T::one(), &a, &b, T::zero(), &mut out);
    out
}

/// Draws all samples as `f64` first so `f32` and `f64` models built from the
/// same seed see the same underlying stream.
pub fn randn_vec<T: Scalar, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            T::f(v * std)
        })
        .collect()
}

pub fn randn3<T: Scalar, R: Rng>(rng: &mut R, dim: (usize, usize, usize), std: f64) -> Plane<T> {
    Array3::from_shape_vec(dim, randn_vec(rng, dim.0 * dim.1 * dim.2, std)).unwrap()
}

pub fn rand_uniform3<T: Scalar, R: Rng>(
    rng: &mut R,
    dim: (usize, usize, usize),
    lo: f64,
    hi: f64,
) -> Plane<T> {
    let n = dim.0 * dim.1 * dim.2;
    let data: Vec<T> = (0..n).map(|_| T::f(rng.gen_range(lo..hi))).collect();
    Array3::from_shape_vec(dim, data).unwrap()
}

/// Largest absolute entry difference between two arrays of equal shape.
pub fn max_abs_diff<T: Scalar, D: ndarray::Dimension>(
    a: &ndarray::Array<T, D>,
    b: &ndarray::Array<T, D>,
) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs().to_f64_lossy())
        .fold(0.0, f64::max)
}

pub fn mean_sq<T: Scalar, D: ndarray::Dimension>(
    a: &ndarray::Array<T, D>,
    b: &ndarray::Array<T, D>,
) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let n = a.len().max(1) as f64;
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y).to_f64_lossy();
            d * d
        })
        .sum::<f64>()
        / n
}

pub fn mean_abs<T: Scalar, D: ndarray::Dimension>(
    a: &ndarray::Array<T, D>,
    b: &ndarray::Array<T, D>,
) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let n = a.len().max(1) as f64;
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).to_f64_lossy().abs())
        .sum::<f64>()
        / n
}

pub fn all_finite<T: Scalar, D: ndarray::Dimension>(a: &ndarray::Array<T, D>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Flattens to a 1-D view in standard layout order.
pub fn flatten<T: Scalar>(a: &Plane<T>) -> Array1<T> {
    Array1::from_iter(a.iter().cloned())
}
