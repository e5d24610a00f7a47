//! Binarized convolution primitives, BDC units, a small reverse-mode
//! training stack and a synthetic occupancy-prediction harness.
//!
//! Bit convention throughout: bit `1` is `+1`, bit `0` is `-1`, packed
//! least-significant bit first along the innermost dimension.

pub mod analysis;
pub mod autograd;
pub mod binarize;
pub mod bitconv;
pub mod error;
pub mod occtoy;
pub mod par;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod units;

pub use error::{Error, Result};
pub use tensor::{BitTensor, Shape, Tensor};
