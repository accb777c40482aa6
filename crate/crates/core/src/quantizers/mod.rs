//! Single-layer weight quantizers: per-tensor uniform, group-wise
//! round-to-nearest, GPTQ-style error compensation and AWQ-style scaling.

mod awq;
mod calibration;
mod gptq;
mod grid;
mod proxy;

pub use awq::{
    awq_quantize, awq_quantize_with_alphas, channel_scales, default_alpha_grid, AwqOutcome,
    AwqSearch, SCALE_MAX, SCALE_MIN,
};
pub use calibration::{CalibrationSet, LayerActivations};
pub use gptq::{gptq_quantize, GptqState, DEFAULT_BLOCK_SIZE, DEFAULT_DAMPING, DEFAULT_GROUP_SIZE};
pub use grid::{
    dequantize, rtn_group_quantize, uniform_quantize, QuantScheme, QuantizedMatrix,
    GROUP_OVERHEAD_BITS, MAX_BITS, MIN_BITS,
};
pub use proxy::proxy_loss;
pub(crate) use proxy::{proxy_loss_gram, weight_diff};
