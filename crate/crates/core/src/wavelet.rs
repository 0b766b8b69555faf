//! Orthonormal single-level Haar transform.
//!
//! `dwt` maps a `(C, H, W)` plane with even `H`, `W` to a
//! `(4C, H/2, W/2)` feature. Sub-bands are stacked band-major along the
//! channel axis in the fixed order `LL, LH, HL, HH`:
//!
//! * `LL` — channels `[0, C)`: 2x2 block averages (x2 with this scaling),
//! * `LH` — channels `[C, 2C)`: detail along width,
//! * `HL` — channels `[2C, 3C)`: detail along height,
//! * `HH` — channels `[3C, 4C)`: diagonal detail.
//!
//! With the 1/2-factor symmetric normalization used here the transform is
//! orthonormal: `idwt` is its exact inverse and energy is preserved. This
//! band order is part of the checkpoint format; changing it silently breaks
//! saved parameters.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::tensor::Plane;

/// Forward transform. Errors on odd spatial dimensions — no implicit padding.
pub fn dwt<T: Scalar>(x: &Plane<T>) -> Result<Plane<T>> {
    let (c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(
            "dwt",
            "even spatial dimensions",
            format!("{h}x{w}"),
        ));
    }
    let (hh, hw) = (h / 2, w / 2);
    let half = T::f(0.5);
    let mut y = Array3::<T>::zeros((4 * c, hh, hw));
    for ci in 0..c {
        for iy in 0..hh {
            for ix in 0..hw {
                let a = x[(ci, 2 * iy, 2 * ix)];
                let b = x[(ci, 2 * iy, 2 * ix + 1)];
                let d = x[(ci, 2 * iy + 1, 2 * ix)];
                let e = x[(ci, 2 * iy + 1, 2 * ix + 1)];
                y[(ci, iy, ix)] = (a + b + d + e) * half;
                y[(c + ci, iy, ix)] = (a - b + d - e) * half;
                y[(2 * c + ci, iy, ix)] = (a + b - d - e) * half;
                y[(3 * c + ci, iy, ix)] = (a - b - d + e) * half;
            }
        }
    }
    Ok(y)
}

/// Inverse transform. Errors when the channel count is not divisible by 4.
pub fn idwt<T: Scalar>(f: &Plane<T>) -> Result<Plane<T>> {
    let (c4, hh, hw) = f.dim();
    if c4 % 4 != 0 {
        return Err(Error::dim(
            "idwt",
            "channel count divisible by 4",
            format!("{c4}"),
        ));
    }
    let c = c4 / 4;
    let half = T::f(0.5);
    let mut x = Array3::<T>::zeros((c, hh * 2, hw * 2));
    for ci in 0..c {
        for iy in 0..hh {
            for ix in 0..hw {
                let ll = f[(ci, iy, ix)];
                let lh = f[(c + ci, iy, ix)];
                let hl = f[(2 * c + ci, iy, ix)];
                let hhb = f[(3 * c + ci, iy, ix)];
                x[(ci, 2 * iy, 2 * ix)] = (ll + lh + hl + hhb) * half;
                x[(ci, 2 * iy, 2 * ix + 1)] = (ll - lh + hl - hhb) * half;
                x[(ci, 2 * iy + 1, 2 * ix)] = (ll + lh - hl - hhb) * half;
                x[(ci, 2 * iy + 1, 2 * ix + 1)] = (ll - lh - hl + hhb) * half;
            }
        }
    }
    Ok(x)
}

/// Gradient of `dwt`: the transform is orthogonal, so the adjoint is `idwt`.
pub fn dwt_bwd<T: Scalar>(dy: &Plane<T>) -> Plane<T> {
    idwt(dy).expect("dwt output always has 4k channels")
}

/// Gradient of `idwt`: adjoint of the inverse is the forward transform.
pub fn idwt_bwd<T: Scalar>(dy: &Plane<T>) -> Plane<T> {
    dwt(dy).expect("idwt output always has even dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::{max_abs_diff, rand_uniform3};

    #[test]
    fn constant_image_concentrates_in_ll() {
        let v = 0.37f64;
        let x = Array3::from_elem((3, 6, 6), v);
        let f = dwt(&x).unwrap();
        for ci in 0..3 {
            for iy in 0..3 {
                for ix in 0..3 {
                    assert!((f[(ci, iy, ix)] - 2.0 * v).abs() < 1e-12);
                }
            }
        }
        // every detail coefficient vanishes
        assert!(f
            .slice(ndarray::s![3.., .., ..])
            .iter()
            .all(|&z| z.abs() < 1e-12));
    }

    #[test]
    fn two_by_two_block_matches_hand_matrix() {
        // Analysis of [[a, b], [c, d]] through the orthonormal Haar matrix,
        // worked out by hand from the 1/2-scaled sums/differences:
        //   LL = (a+b+c+d)/2   LH = (a-b+c-d)/2
        //   HL = (a+b-c-d)/2   HH = (a-b-c+d)/2
        let (a, b, c, d) = (1.0f64, 2.0, -3.0, 0.5);
        let x = array![[[a, b], [c, d]]];
        let f = dwt(&x).unwrap();
        assert!((f[(0, 0, 0)] - (a + b + c + d) / 2.0).abs() < 1e-12);
        assert!((f[(1, 0, 0)] - (a - b + c - d) / 2.0).abs() < 1e-12);
        assert!((f[(2, 0, 0)] - (a + b - c - d) / 2.0).abs() < 1e-12);
        assert!((f[(3, 0, 0)] - (a - b - c + d) / 2.0).abs() < 1e-12);
        // and the inverse reproduces the block from those hand values
        let back = idwt(&f).unwrap();
        assert!(max_abs_diff(&back, &x) < 1e-12);
    }

    #[test]
    fn roundtrip_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_uniform3::<f64, _>(&mut rng, (3, 8, 8), 0.0, 1.0);
        let y = idwt(&dwt(&x).unwrap()).unwrap();
        assert!(max_abs_diff(&y, &x) <= 1e-6);
    }

    #[test]
    fn linearity_and_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_uniform3::<f64, _>(&mut rng, (2, 6, 6), -1.0, 1.0);
        let y = rand_uniform3::<f64, _>(&mut rng, (2, 6, 6), -1.0, 1.0);
        let (a, b) = (0.7, -1.3);
        let lhs = dwt(&(&x * a + &y * b)).unwrap();
        let rhs = &dwt(&x).unwrap() * a + &dwt(&y).unwrap() * b;
        assert!(max_abs_diff(&lhs, &rhs) < 1e-6);

        let ex: f64 = x.iter().map(|v| v * v).sum();
        let ef: f64 = dwt(&x).unwrap().iter().map(|v| v * v).sum();
        assert!((ex - ef).abs() / ex < 1e-6);
    }

    #[test]
    fn zero_feature_inverts_to_zero() {
        let f = Array3::<f64>::zeros((12, 4, 4));
        let x = idwt(&f).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_errors() {
        let x = Array3::<f64>::zeros((3, 5, 6));
        assert!(dwt(&x).is_err());
        let f = Array3::<f64>::zeros((7, 4, 4));
        assert!(idwt(&f).is_err());
    }

    #[test]
    fn adjoint_matches_inverse() {
        // <dwt(x), y> == <x, idwt(y)> confirms dwt_bwd/idwt_bwd wiring
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_uniform3::<f64, _>(&mut rng, (1, 4, 4), -1.0, 1.0);
        let y = rand_uniform3::<f64, _>(&mut rng, (4, 2, 2), -1.0, 1.0);
        let lhs = (&dwt(&x).unwrap() * &y).sum();
        let rhs = (&x * &idwt(&y).unwrap()).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
