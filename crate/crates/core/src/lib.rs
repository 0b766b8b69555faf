//! Dual invisible watermarking for image forensics.
//!
//! A container image carries two hidden watermarks at once: a pixel-aligned
//! localization watermark embedded by an invertible coupling codec (its
//! decode-side residual exposes tampered pixels), and a global L-bit
//! copyright payload embedded by an asymmetric U-shaped codec. The crate
//! provides the full pipeline: embedding, a simulated transmission channel
//! (noise / compression / paste tampering), decoding with a prompt-based
//! estimator for the discarded high-frequency information, two-phase
//! training, and the evaluation harness.
//!
//! All numeric code is generic over the scalar type; [`Real`] is the
//! runtime precision and `f64` is used by the verification tests.

pub mod error;
pub mod num;
pub mod tensor;

pub mod inn;
pub mod nn;
pub mod wavelet;

pub use error::{Error, Result};
pub use num::Scalar;

/// Runtime scalar for training and inference.
pub type Real = f32;

/// High-precision scalar for oracle and gradient verification work.
pub type Precise = f64;
