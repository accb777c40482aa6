use serde::{Deserialize, Serialize};

use super::forest::r_squared;
use super::AttributionDataset;
use crate::error::Result;
use crate::numerics::{cholesky_spd, Matrix};

pub const MIN_LINEAR_ROWS: usize = 4;
pub const LINEAR_DAMPING: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub r2: f64,
    /// The centred normal equations were rank deficient; `r2` then comes
    /// from the damped pseudo-solution.
    pub rank_deficient: bool,
}

/// Training R² of ordinary least squares with an intercept.
pub fn linear_baseline_r2(data: &AttributionDataset) -> Result<LinearFit> {
    data.require_rows(MIN_LINEAR_ROWS)?;
    let (n, p) = (data.len() as f64, data.features());
    let means: Vec<f64> = (0..p).map(|j| data.rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let y_mean = data.target.iter().sum::<f64>() / n;
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for (r, y) in data.rows.iter().zip(&data.target) {
        for a in 0..p {
            let xa = r[a] - means[a];
            xty[a] += xa * (y - y_mean);
            for b in 0..p {
                xtx[a * p + b] += xa * (r[b] - means[b]);
            }
        }
    }
    let diag_max = (0..p).map(|j| xtx[j * p + j]).fold(0.0, f64::max);
    let mut rank_deficient = (0..p).any(|j| xtx[j * p + j] <= 1e-12 * diag_max.max(f64::MIN_POSITIVE));
    if diag_max <= 0.0 {
        return Ok(LinearFit { r2: 0.0, rank_deficient: true });
    }
    let a = Matrix::new(p, p, xtx.clone())?;
    let l = match cholesky_spd(&a, LINEAR_DAMPING) {
        Ok(l) => l,
        Err(_) => {
            rank_deficient = true;
            cholesky_spd(&a, LINEAR_DAMPING * 1e3)?
        }
    };
    // Forward then backward substitution with the lower factor.
    let mut z = vec![0.0; p];
    for i in 0..p {
        let s: f64 = (0..i).map(|k| l.get(i, k) * z[k]).sum();
        z[i] = (xty[i] - s) / l.get(i, i);
    }
    let mut beta = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|k| l.get(k, i) * beta[k]).sum();
        beta[i] = (z[i] - s) / l.get(i, i);
    }
    let pred: Vec<f64> = data
        .rows
        .iter()
        .map(|r| y_mean + (0..p).map(|j| beta[j] * (r[j] - means[j])).sum::<f64>())
        .collect();
    Ok(LinearFit { r2: r_squared(&data.target, &pred), rank_deficient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::{fit_random_forest, ForestConfig};

    fn grid(f: impl Fn(f64, f64, f64) -> f64) -> AttributionDataset {
        let bits = [2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 16.0];
        let mut rows = Vec::new();
        for &a in &bits {
            for &b in &bits {
                for &c in &bits {
                    rows.push(vec![a, b, c]);
                }
            }
        }
        let y = rows.iter().map(|r| f(r[0], r[1], r[2])).collect();
        AttributionDataset::new(vec!["vision".into(), "connector".into(), "language".into()], rows, y).unwrap()
    }

    #[test]
    fn exact_linear_target() {
        let fit = linear_baseline_r2(&grid(|a, b, c| 0.5 + 0.1 * a - 0.02 * b + 0.3 * c)).unwrap();
        assert!((fit.r2 - 1.0).abs() < 1e-9, "{fit:?}");
        assert!(!fit.rank_deficient);
    }

    #[test]
    fn constant_target_is_zero() {
        assert_eq!(linear_baseline_r2(&grid(|_, _, _| 0.7)).unwrap().r2, 0.0);
    }

    #[test]
    fn constant_feature_is_flagged() {
        let mut d = grid(|a, _, c| a + c);
        for r in &mut d.rows {
            r[1] = 4.0;
        }
        let fit = linear_baseline_r2(&d).unwrap();
        assert!(fit.rank_deficient);
        assert!((fit.r2 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cliffs_defeat_the_linear_model() {
        let d = grid(|v, _, l| if l >= 4.0 && v >= 3.0 { 1.0 } else { 0.0 });
        let lin = linear_baseline_r2(&d).unwrap().r2;
        let forest = fit_random_forest(&d, ForestConfig::default()).unwrap().r2(&d);
        assert!(forest - lin >= 0.15, "forest {forest} linear {lin}");
        let step = grid(|_, _, l| if l >= 4.0 { 1.0 } else { 0.0 });
        assert!(linear_baseline_r2(&step).unwrap().r2 <= 0.8);
    }
}
