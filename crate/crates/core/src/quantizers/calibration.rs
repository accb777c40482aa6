use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Scalar};
use crate::pipeline::LayerAddress;

/// Input activations recorded for one linear layer, with the statistics the
/// calibrated quantizers need precomputed once.
#[derive(Debug, Clone)]
pub struct LayerActivations<T> {
    x: Matrix<T>,
    gram: Matrix<f64>,
    channel_magnitude: Vec<f64>,
}

impl<T: Scalar> LayerActivations<T> {
    pub fn new(x: Matrix<T>) -> Self {
        let gram = x.gram();
        let n = x.rows() as f64;
        let channel_magnitude = (0..x.cols())
            .map(|c| (0..x.rows()).map(|r| x.get(r, c).widen().abs()).sum::<f64>() / n)
            .collect();
        Self { x, gram, channel_magnitude }
    }

    /// Samples × in_features.
    pub fn x(&self) -> &Matrix<T> {
        &self.x
    }

    /// `XᵀX`.
    pub fn gram(&self) -> &Matrix<f64> {
        &self.gram
    }

    /// Mean absolute activation per input channel.
    pub fn channel_magnitude(&self) -> &[f64] {
        &self.channel_magnitude
    }

    pub fn samples(&self) -> usize {
        self.x.rows()
    }

    pub fn in_features(&self) -> usize {
        self.x.cols()
    }

    pub(crate) fn check_weight(&self, w: &Matrix<T>) -> Result<()> {
        if w.cols() != self.in_features() {
            return Err(Error::ShapeMismatch(format!(
                "weight has {} inputs, calibration has {} features",
                w.cols(),
                self.in_features()
            )));
        }
        Ok(())
    }
}

/// Per-layer calibration activations gathered from probe pairs.
///
/// Layers that read the same input (the q/k/v projections of one attention)
/// share a single entry.
#[derive(Debug, Clone, Default)]
pub struct CalibrationSet {
    pub layers: BTreeMap<LayerAddress, Arc<LayerActivations<f32>>>,
    pub sample_count: usize,
}

impl CalibrationSet {
    pub fn get(&self, addr: &LayerAddress) -> Result<&LayerActivations<f32>> {
        self.layers
            .get(addr)
            .map(Arc::as_ref)
            .ok_or_else(|| Error::MissingCalibration(addr.name()))
    }
}
