//! Dense linear algebra and deterministic randomness shared by the lab.

mod cholesky;
mod matrix;
mod rng;
mod scalar;

pub use cholesky::{cholesky_spd, damping_shift, invert_spd};
pub(crate) use cholesky::{cholesky_f64, invert_spd_f64};
pub use matrix::{dot, Matrix};
pub(crate) use matrix::min_max;
pub use rng::{randn_matrix, RngStream};
pub use scalar::Scalar;
