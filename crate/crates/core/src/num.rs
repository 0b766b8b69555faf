//! Scalar abstraction: all numeric code in this crate is generic over the
//! element type so the same operators run at `f32` (training/inference speed)
//! and `f64` (reference checks and finite-difference verification).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type usable by every tensor operator in the crate.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Shorthand conversion from `f64` literals; panics only on NaN inputs
    /// that cannot be represented, which never occurs for the constants used.
    fn f(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
