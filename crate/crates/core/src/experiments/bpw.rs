use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::pipeline::{LedgerEntry, ModelWeights, QuantizationLedger};

/// Bits per weight stored for an unquantized layer.
pub const BASELINE_BITS: u64 = 16;

/// Average storage bits per quantizable weight. Layers missing from the
/// ledger count at 16 bits; embeddings, norms and the head are excluded.
pub fn compute_bpw(ledger: &QuantizationLedger, weights: &ModelWeights) -> Result<f64> {
    bpw_of(ledger.entries.iter(), weights)
}

pub(crate) fn bpw_of<'a>(entries: impl IntoIterator<Item = &'a LedgerEntry>, weights: &ModelWeights) -> Result<f64> {
    let mut by_layer = BTreeMap::new();
    for e in entries {
        let w = weights.layer(&e.address).map_err(|_| Error::UnknownLayer(e.layer.clone()))?;
        if w.len() as u64 != e.weights {
            return Err(Error::InvalidArgument(format!(
                "ledger entry {} covers {} weights, layer has {}",
                e.layer,
                e.weights,
                w.len()
            )));
        }
        // A later entry for the same layer supersedes an earlier one.
        by_layer.insert(e.address, e.storage_bits);
    }
    let mut bits = 0u64;
    let mut total = 0u64;
    for (addr, w) in weights.layers() {
        let n = w.len() as u64;
        total += n;
        bits += by_layer.get(addr).copied().unwrap_or(BASELINE_BITS * n);
    }
    if total == 0 {
        return Ok(BASELINE_BITS as f64);
    }
    Ok(bits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{apply_quantization, build_model, PipelineSpec, QuantConfig, QuantMethod, Selector};

    #[test]
    fn nothing_quantized_is_sixteen() {
        let w = build_model(&PipelineSpec::default()).unwrap();
        assert_eq!(compute_bpw(&QuantizationLedger::default(), &w).unwrap(), 16.0);
    }

    #[test]
    fn per_tensor_overhead() {
        let w = build_model(&PipelineSpec::default()).unwrap();
        let (_, ledger) = apply_quantization(&w, &Selector::all(), &QuantConfig::new(QuantMethod::Uniform, 4), None).unwrap();
        let bpw = compute_bpw(&ledger, &w).unwrap();
        assert!((bpw - 4.0).abs() < 0.01, "{bpw}");
        let expected = 4.0 + 32.0 * ledger.len() as f64 / w.quantizable_parameters() as f64;
        assert!((bpw - expected).abs() < 1e-12);
    }

    #[test]
    fn group_128_is_four_and_a_quarter() {
        let spec = PipelineSpec { d_model: 128, vision_blocks: 3, connector_blocks: 3, language_blocks: 3, ..PipelineSpec::default() };
        let w = build_model(&spec).unwrap();
        let cfg = QuantConfig::new(QuantMethod::Rtn, 4).with_group_size(128);
        let (_, ledger) = apply_quantization(&w, &Selector::all(), &cfg, None).unwrap();
        assert_eq!(compute_bpw(&ledger, &w).unwrap(), 4.25);
    }

    #[test]
    fn unknown_layers_are_rejected() {
        let big = build_model(&PipelineSpec::default()).unwrap();
        let small = build_model(&PipelineSpec { vision_blocks: 3, ..PipelineSpec::default() }).unwrap();
        let (_, ledger) = apply_quantization(&big, &Selector::all(), &QuantConfig::new(QuantMethod::Uniform, 4), None).unwrap();
        assert!(matches!(compute_bpw(&ledger, &small), Err(Error::UnknownLayer(_))));
    }
}
