//! MatMamba: Mamba2 blocks with nested (Matryoshka) inner widths.
//!
//! Every block's inner-width dependent weights are read through prefix
//! slices, so a single set of parameters holds a whole family of smaller
//! models. The crate trains those granularities jointly and serves any
//! per-layer mix of them at inference time.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32`, `f64`); the
//! aliases below fix it to `f32`, the storage type of checkpoints.

pub mod autograd;
pub mod block;
pub mod cli;
pub mod elastic;
pub mod error;
pub mod init;
pub mod io;
pub mod linalg;
pub mod model;
pub mod params;
pub mod scalar;
pub mod ssd;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub type Tensor = tensor::Tensor<f32>;
pub type ParamStore = params::ParamStore<f32>;
pub type Model = model::ModelParams<f32>;
pub type Graph = autograd::Graph<f32>;
