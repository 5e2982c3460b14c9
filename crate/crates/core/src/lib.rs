//! Captioning (Cap), parallel-prediction captioning (CapPa) and a matched
//! contrastive baseline, with the evaluation protocols used to compare them.
//!
//! All numeric code is generic over [`Scalar`]; training uses `f32` and the
//! gradient checks run the same code in `f64`.

mod binio;
pub mod datagen;
pub mod error;
pub mod evalsuite;
pub mod model;
pub mod objective;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tok;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
