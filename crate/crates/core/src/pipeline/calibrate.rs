use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use super::forward::{trace_probe, ActivationTap};
use super::{LayerAddress, ModelWeights};
use crate::error::{Error, Result};
use crate::quantizers::{CalibrationSet, LayerActivations};
use crate::tasks::ProbeSet;
use crate::Matrix;

pub const DEFAULT_CALIBRATION_PROBES: usize = 128;
pub const MAX_CALIBRATION_ROWS: usize = 2048;

#[derive(Default)]
struct Collector {
    /// Keyed by the first address of each shared-input group.
    rows: BTreeMap<LayerAddress, (usize, Vec<f32>)>,
    members: BTreeMap<LayerAddress, LayerAddress>,
}

impl ActivationTap for Collector {
    fn record(&mut self, layers: &[LayerAddress], input: &Matrix) {
        let key = layers[0];
        for &l in layers {
            self.members.insert(l, key);
        }
        let entry = self.rows.entry(key).or_insert_with(|| (input.cols(), Vec::new()));
        entry.1.extend_from_slice(input.data());
    }
}

/// Evenly strided subset of at most `cap` rows.
fn subsample(cols: usize, data: Vec<f32>, cap: usize) -> Matrix {
    let total = data.len() / cols;
    if total <= cap {
        return Matrix::from_parts(total, cols, data);
    }
    let mut out = Vec::with_capacity(cap * cols);
    for i in 0..cap {
        let r = i * total / cap;
        out.extend_from_slice(&data[r * cols..(r + 1) * cols]);
    }
    Matrix::from_parts(cap, cols, out)
}

/// Runs the full-precision model over the first `n` probes and records the
/// input activations of every addressable layer.
pub fn collect_calibration(weights: &ModelWeights, probes: &ProbeSet, n: usize) -> Result<CalibrationSet> {
    if n == 0 || probes.pairs.len() < n {
        return Err(Error::InsufficientProbes { needed: n.max(1), available: probes.pairs.len() });
    }
    let mut collector = Collector::default();
    for probe in &probes.pairs[..n] {
        trace_probe(weights, probe, &mut collector)?;
    }
    let Collector { rows, members } = collector;
    let shared: BTreeMap<LayerAddress, Arc<LayerActivations<f32>>> = rows
        .into_par_iter()
        .map(|(key, (cols, data))| (key, Arc::new(LayerActivations::new(subsample(cols, data, MAX_CALIBRATION_ROWS)))))
        .collect();
    let layers = members.into_iter().map(|(addr, key)| (addr, Arc::clone(&shared[&key]))).collect();
    Ok(CalibrationSet { layers, sample_count: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{build_model, ComponentId, PipelineSpec, Selector, Sublayer};
    use crate::tasks::make_probe_set;

    #[test]
    fn shapes_and_single_probe_rows() {
        let spec = PipelineSpec::default();
        let w = build_model(&spec).unwrap();
        let probes = make_probe_set(&spec, 11, 2).unwrap();
        let calib = collect_calibration(&w, &probes, 1).unwrap();
        assert_eq!(calib.layers.len(), w.enumerate_layers(&Selector::all()).len());
        for (addr, acts) in &calib.layers {
            assert_eq!(acts.in_features(), w.layer(addr).unwrap().cols(), "{addr}");
        }
        let seq = spec.prefix_len() + probes.pairs[0].question_ids.len() + 1 + probes.pairs[0].text_ids.len();
        let lang = LayerAddress::new(ComponentId::Language, 0, 6, Sublayer::FfDown);
        assert_eq!(calib.get(&lang).unwrap().samples(), seq);
        let vis = LayerAddress::new(ComponentId::Vision, 2, 6, Sublayer::AttnQ);
        assert_eq!(calib.get(&vis).unwrap().samples(), spec.patch_count);
        let ck = LayerAddress::new(ComponentId::Connector, 1, 3, Sublayer::AttnK);
        let cq = LayerAddress::new(ComponentId::Connector, 1, 3, Sublayer::AttnQ);
        assert_eq!(calib.get(&ck).unwrap().samples(), spec.patch_count);
        assert_eq!(calib.get(&cq).unwrap().samples(), spec.query_count);
    }

    #[test]
    fn not_enough_probes() {
        let spec = PipelineSpec::default();
        let w = build_model(&spec).unwrap();
        let probes = make_probe_set(&spec, 11, 2).unwrap();
        assert!(matches!(collect_calibration(&w, &probes, 3), Err(Error::InsufficientProbes { .. })));
    }

    #[test]
    fn subsample_is_strided() {
        let m = subsample(1, (0..10).map(|v| v as f32).collect(), 4);
        assert_eq!(m.data(), &[0.0, 2.0, 5.0, 7.0]);
    }
}
