//! Minimal reverse-mode neural-network toolkit used by the codec modules.
//!
//! There is no dynamic tape: every block carries an explicit
//! `forward` / `forward_t` / `backward` triple and all learnable tensors are
//! registered in a central [`params::ParamStore`].

pub mod adam;
pub mod blocks;
pub mod layers;
pub mod ops;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use layers::{Conv2d, DwConv3, LayerNormC, Linear};
pub use params::{Builder, Grads, Init, ParamId, ParamStore};
