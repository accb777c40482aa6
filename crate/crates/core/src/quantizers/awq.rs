//! Activation-aware scaling search.
//!
//! Input channel `j` is scaled by `s_j = (a_j / geomean(a))^α` before
//! round-to-nearest, where `a_j` is the mean absolute activation. The
//! exponent is picked from a fixed grid by the calibration proxy loss, and
//! `1/s_j` is stored alongside the codes.

use super::grid::{check_bits, check_finite, rtn_group_quantize, QuantizedMatrix};
use super::proxy::{proxy_loss_gram, weight_diff};
use super::LayerActivations;
use crate::error::Result;
use crate::numerics::{Matrix, Scalar};

pub const SCALE_MIN: f64 = 1e-4;
pub const SCALE_MAX: f64 = 1e4;

/// `{0, 0.05, …, 1.0}`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Search trace: channel magnitudes, the exponents tried and their losses.
#[derive(Debug, Clone)]
pub struct AwqSearch {
    pub channel_magnitude: Vec<f64>,
    pub alpha_grid: Vec<f64>,
    pub losses: Vec<f64>,
    pub chosen_alpha: f64,
}

#[derive(Debug, Clone)]
pub struct AwqOutcome<T> {
    pub quantized: QuantizedMatrix<T>,
    pub chosen_alpha: f64,
    pub proxy_error: f64,
    pub search: AwqSearch,
}

/// Per-channel scales for exponent `alpha`. Silent channels keep scale 1.
pub fn channel_scales(magnitude: &[f64], alpha: f64) -> Vec<f64> {
    let active: Vec<f64> = magnitude.iter().copied().filter(|&a| a > 0.0).collect();
    if active.is_empty() || alpha == 0.0 {
        return vec![1.0; magnitude.len()];
    }
    let log_mean = active.iter().map(|a| a.ln()).sum::<f64>() / active.len() as f64;
    let geomean = log_mean.exp();
    magnitude
        .iter()
        .map(|&a| if a > 0.0 { (a / geomean).powf(alpha).clamp(SCALE_MIN, SCALE_MAX) } else { 1.0 })
        .collect()
}

fn quantize_scaled<T: Scalar>(
    w: &Matrix<T>,
    scales: &[T],
    bits: u8,
    group_size: usize,
) -> Option<QuantizedMatrix<T>> {
    if scales.iter().all(|&s| s == T::one()) {
        return rtn_group_quantize(w, bits, group_size).ok();
    }
    let cols = w.cols();
    let data: Vec<T> = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| T::from_wide(v.widen() * scales[i % cols].widen()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let scaled = Matrix::from_parts(w.rows(), cols, data);
    rtn_group_quantize(&scaled, bits, group_size)
        .ok()
        .map(|q| q.with_channel_scales(scales.to_vec()))
}

/// AWQ restricted to the given exponents; ties keep the earliest exponent.
pub fn awq_quantize_with_alphas<T: Scalar>(
    w: &Matrix<T>,
    acts: &LayerActivations<T>,
    bits: u8,
    group_size: usize,
    alphas: &[f64],
) -> Result<AwqOutcome<T>> {
    acts.check_weight(w)?;
    check_bits(bits)?;
    check_finite(w)?;
    if group_size == 0 {
        return Err(crate::Error::InvalidArgument("group_size must be positive".into()));
    }
    if alphas.is_empty() {
        return Err(crate::Error::InvalidArgument("empty alpha grid".into()));
    }
    let magnitude = acts.channel_magnitude().to_vec();
    let mut best: Option<(usize, QuantizedMatrix<T>, f64)> = None;
    let mut losses = Vec::with_capacity(alphas.len());
    for (i, &alpha) in alphas.iter().enumerate() {
        let scales: Vec<T> = channel_scales(&magnitude, alpha).into_iter().map(T::from_wide).collect();
        let Some(q) = quantize_scaled(w, &scales, bits, group_size) else {
            losses.push(f64::INFINITY);
            continue;
        };
        let loss = proxy_loss_gram(&weight_diff(w, &q.dequantize()), w.rows(), acts.gram());
        losses.push(loss);
        if best.as_ref().is_none_or(|(_, _, l)| loss < *l) {
            best = Some((i, q, loss));
        }
    }
    let (idx, quantized, proxy_error) = match best {
        Some(b) => b,
        // Every scaled candidate overflowed: plain RTN.
        None => {
            let q = rtn_group_quantize(w, bits, group_size)?;
            let loss = proxy_loss_gram(&weight_diff(w, &q.dequantize()), w.rows(), acts.gram());
            (usize::MAX, q, loss)
        }
    };
    let chosen_alpha = alphas.get(idx).copied().unwrap_or(0.0);
    Ok(AwqOutcome {
        quantized,
        chosen_alpha,
        proxy_error,
        search: AwqSearch { channel_magnitude: magnitude, alpha_grid: alphas.to_vec(), losses, chosen_alpha },
    })
}

/// AWQ over the default 21-point exponent grid.
pub fn awq_quantize<T: Scalar>(
    w: &Matrix<T>,
    acts: &LayerActivations<T>,
    bits: u8,
    group_size: usize,
) -> Result<AwqOutcome<T>> {
    awq_quantize_with_alphas(w, acts, bits, group_size, &default_alpha_grid())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{randn_matrix, RngStream};
    use crate::quantizers::proxy_loss;

    fn skewed(seed: u64, rows: usize, cols: usize, factor: f64) -> (Matrix<f64>, LayerActivations<f64>) {
        let mut s = RngStream::new(seed);
        let w = randn_matrix(&mut s, rows, cols, 1.0).unwrap();
        let mut x: Matrix<f64> = randn_matrix(&mut s, 32, cols, 1.0).unwrap();
        for r in 0..x.rows() {
            x.set(r, 0, x.get(r, 0) * factor);
        }
        (w, LayerActivations::new(x))
    }

    #[test]
    fn alpha_zero_is_rtn() {
        let (w, acts) = skewed(1, 8, 16, 100.0);
        let out = awq_quantize_with_alphas(&w, &acts, 3, 8, &[0.0]).unwrap();
        assert_eq!(out.quantized, rtn_group_quantize(&w, 3, 8).unwrap());
        assert_eq!(out.chosen_alpha, 0.0);
    }

    #[test]
    fn salient_channel_pulls_alpha_up() {
        let (w, acts) = skewed(2, 8, 16, 1000.0);
        let out = awq_quantize(&w, &acts, 3, 128).unwrap();
        let rtn = awq_quantize_with_alphas(&w, &acts, 3, 128, &[0.0]).unwrap();
        assert!(out.chosen_alpha > 0.0);
        assert!(out.proxy_error < rtn.proxy_error);
        let direct = proxy_loss(&w, &out.quantized.dequantize(), acts.x()).unwrap();
        assert!((direct - out.proxy_error).abs() <= 1e-9 * direct);
    }

    #[test]
    fn sixteen_bits_is_near_lossless() {
        let (w, acts) = skewed(3, 8, 16, 100.0);
        let out = awq_quantize(&w, &acts, 16, 128).unwrap();
        let zero = Matrix::<f64>::zeros(8, 16);
        let energy = proxy_loss(&w, &zero, acts.x()).unwrap();
        assert!(out.proxy_error <= 1e-6 * energy);
    }

    #[test]
    fn silent_channels_keep_unit_scale() {
        let s = channel_scales(&[0.0, 1.0, 4.0], 1.0);
        assert_eq!(s[0], 1.0);
        assert!((s[1] - 0.5).abs() < 1e-12 && (s[2] - 2.0).abs() < 1e-12);
        assert!(channel_scales(&[1e-30, 1e30], 1.0).iter().all(|v| (SCALE_MIN..=SCALE_MAX).contains(v)));
    }

    #[test]
    fn never_worse_than_rtn() {
        for seed in 0..30 {
            let (w, acts) = skewed(10 + seed, 8, 16, 100.0);
            let awq = awq_quantize(&w, &acts, 2, 128).unwrap();
            let rtn = proxy_loss(&w, &rtn_group_quantize(&w, 2, 128).unwrap().dequantize(), acts.x()).unwrap();
            assert!(awq.proxy_error <= rtn * (1.0 + 1e-12));
        }
    }
}
