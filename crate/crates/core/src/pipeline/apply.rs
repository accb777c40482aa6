use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LayerAddress, ModelWeights, Selector};
use crate::error::{Error, Result};
use crate::quantizers::{
    awq_quantize, proxy_loss_gram, rtn_group_quantize, uniform_quantize, weight_diff, CalibrationSet,
    GptqState, LayerActivations, QuantizedMatrix, DEFAULT_BLOCK_SIZE, DEFAULT_DAMPING, DEFAULT_GROUP_SIZE,
};
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMethod {
    Uniform,
    Rtn,
    Gptq,
    Awq,
}

impl QuantMethod {
    pub fn token(self) -> &'static str {
        match self {
            QuantMethod::Uniform => "uniform",
            QuantMethod::Rtn => "rtn",
            QuantMethod::Gptq => "gptq",
            QuantMethod::Awq => "awq",
        }
    }

    pub fn needs_calibration(self) -> bool {
        matches!(self, QuantMethod::Gptq | QuantMethod::Awq)
    }
}

impl std::fmt::Display for QuantMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.token())
    }
}

impl std::str::FromStr for QuantMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(QuantMethod::Uniform),
            "rtn" => Ok(QuantMethod::Rtn),
            "gptq" => Ok(QuantMethod::Gptq),
            "awq" => Ok(QuantMethod::Awq),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub method: QuantMethod,
    pub bits: u8,
    /// Input channels per grid; ignored by `Uniform`, which is per-tensor.
    pub group_size: usize,
    pub damping: f64,
    pub block_size: usize,
}

impl QuantConfig {
    pub fn new(method: QuantMethod, bits: u8) -> Self {
        Self { method, bits, group_size: DEFAULT_GROUP_SIZE, damping: DEFAULT_DAMPING, block_size: DEFAULT_BLOCK_SIZE }
    }

    pub fn with_group_size(mut self, group_size: usize) -> Self {
        self.group_size = group_size;
        self
    }
}

/// Per-layer record for bits-per-weight accounting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub layer: String,
    #[serde(skip)]
    pub address: LayerAddress,
    pub method: QuantMethod,
    pub bits: u8,
    pub group_size: usize,
    pub weights: u64,
    pub groups: u64,
    pub proxy_error: Option<f64>,
    pub chosen_alpha: Option<f64>,
    pub storage_bits: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct QuantizationLedger {
    pub entries: Vec<LedgerEntry>,
}

impl QuantizationLedger {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn merge(&mut self, other: QuantizationLedger) {
        self.entries.extend(other.entries);
        self.entries.sort_by_key(|e| e.address);
    }
}

fn entry(address: LayerAddress, config: &QuantConfig, q: &QuantizedMatrix<f32>) -> LedgerEntry {
    LedgerEntry {
        layer: address.name(),
        address,
        method: config.method,
        bits: q.bits(),
        group_size: q.group_size(),
        weights: q.codes().len() as u64,
        groups: q.group_count() as u64,
        proxy_error: None,
        chosen_alpha: None,
        storage_bits: q.storage_bits(),
    }
}

/// Quantizes one weight matrix; returns the dequantized replacement.
pub fn quantize_layer(
    address: LayerAddress,
    w: &Matrix,
    config: &QuantConfig,
    acts: Option<&LayerActivations<f32>>,
) -> Result<(Matrix, LedgerEntry)> {
    let missing = || Error::MissingCalibration(address.name());
    let (q, proxy, alpha) = match config.method {
        QuantMethod::Uniform => (uniform_quantize(w, config.bits)?, None, None),
        QuantMethod::Rtn => (rtn_group_quantize(w, config.bits, config.group_size)?, None, None),
        QuantMethod::Gptq => {
            let acts = acts.ok_or_else(missing)?;
            acts.check_weight(w)?;
            let (q, p) = GptqState::from_activations(acts, config.damping, config.block_size).quantize(
                w,
                config.bits,
                config.group_size,
            )?;
            (q, Some(p), None)
        }
        QuantMethod::Awq => {
            let out = awq_quantize(w, acts.ok_or_else(missing)?, config.bits, config.group_size)?;
            (out.quantized, Some(out.proxy_error), Some(out.chosen_alpha))
        }
    };
    let w_hat = q.dequantize();
    let mut e = entry(address, config, &q);
    e.proxy_error = match (proxy, acts) {
        (Some(p), _) => Some(p),
        (None, Some(a)) if a.in_features() == w.cols() => {
            Some(proxy_loss_gram(&weight_diff(w, &w_hat), w.rows(), a.gram()))
        }
        _ => None,
    };
    e.chosen_alpha = alpha;
    Ok((w_hat, e))
}

/// Quantized replacements for every layer selected by `sel`.
pub fn quantize_layers(
    weights: &ModelWeights,
    sel: &Selector,
    config: &QuantConfig,
    calib: Option<&CalibrationSet>,
) -> Result<Vec<(LayerAddress, Arc<Matrix>, LedgerEntry)>> {
    let addrs = weights.enumerate_layers(sel);
    let mut acts = Vec::with_capacity(addrs.len());
    for addr in &addrs {
        let a = match calib {
            Some(c) => c.layers.get(addr).map(Arc::as_ref),
            None => None,
        };
        if config.method.needs_calibration() && a.is_none() {
            return Err(Error::MissingCalibration(addr.name()));
        }
        acts.push(a);
    }
    addrs
        .par_iter()
        .zip(acts.par_iter())
        .map(|(addr, a)| {
            let (m, e) = quantize_layer(*addr, weights.layer(addr)?, config, *a)?;
            Ok((*addr, Arc::new(m), e))
        })
        .collect()
}

/// Simulated quantization of the selected layers; everything else is shared
/// with `weights` unchanged.
pub fn apply_quantization(
    weights: &ModelWeights,
    sel: &Selector,
    config: &QuantConfig,
    calib: Option<&CalibrationSet>,
) -> Result<(ModelWeights, QuantizationLedger)> {
    let replaced = quantize_layers(weights, sel, config, calib)?;
    let mut ledger = QuantizationLedger::default();
    let mut swaps = Vec::with_capacity(replaced.len());
    for (addr, m, e) in replaced {
        swaps.push((addr, m));
        ledger.entries.push(e);
    }
    Ok((weights.with_layers(swaps)?, ledger))
}
