//! Toy multimodal pipeline: vision tower, connector and language decoder
//! whose linear layers are addressable by component, block group and layer
//! type and replaceable by quantized weights.

mod address;
mod apply;
mod calibrate;
pub mod forward;
pub mod io;
mod spec;
mod weights;

pub use address::{join_tokens, parse_tokens, BlockGroup, ComponentId, LayerAddress, LayerType, Selector, Sublayer};
pub use apply::{
    apply_quantization, quantize_layer, quantize_layers, LedgerEntry, QuantConfig, QuantMethod,
    QuantizationLedger,
};
pub use calibrate::{collect_calibration, DEFAULT_CALIBRATION_PROBES, MAX_CALIBRATION_ROWS};
pub use forward::{forward, TaskKind, TaskOutput, VisualPrefix};
pub use io::{export_weights, import_weights};
pub use spec::{ConnectorKind, PipelineSpec};
pub use weights::{build_model, enumerate_layers, layer_addresses, BlockNorms, FixedTensors, LayerNorm, ModelWeights};
