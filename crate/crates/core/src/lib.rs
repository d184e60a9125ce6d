//! A small tape-based autodiff engine and the networks of a neural
//! calculator that maps handwritten expression images to answer images.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); models train and
//! serialize in `f32`, gradient checks run in `f64`.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use nn::{Mode, ModelGraph, ModelKind};
pub use scalar::Scalar;
pub use tensor::{Gradients, Tape, Tensor, Var};

/// Single-precision tensor, the type models are trained and stored in.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, used for gradient checking.
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
/// A model in checkpoint precision.
pub type Model = ModelGraph<f32>;
