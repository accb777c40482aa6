//! Component-wise quantization lab for a toy vision-language pipeline.
//!
//! The numeric core is generic over the scalar type; the aliases below fix
//! it to `f32`, which is what the pipeline stores.

mod error;
pub mod numerics;
pub mod pipeline;
pub mod quantizers;
pub mod experiments;
pub mod importance;
pub mod tasks;

pub use error::{Error, Result};

pub type Matrix = numerics::Matrix<f32>;
pub type Matrix64 = numerics::Matrix<f64>;
pub type QuantizedMatrix = quantizers::QuantizedMatrix<f32>;
