//! Mixture-conditioned flow matching.
//!
//! Numeric building blocks are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the double-precision types used by the trainer, theory
//! and dataset layers.

pub mod datasets;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod mixture;
pub mod nn;
pub mod ot;
pub mod rng;
pub mod scalar;
pub mod theory;
pub mod trainer;
mod serde_mat;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Mlp = nn::MlpParams<f64>;
pub type Mlp32 = nn::MlpParams<f32>;
