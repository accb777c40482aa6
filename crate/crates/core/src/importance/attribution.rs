use std::collections::HashMap;

use rayon::prelude::*;

use super::forest::{fit_unchecked, ForestConfig, ForestModel, Node, MIN_FOREST_ROWS};
use super::report::{percentile, ImportanceMethod, ImportanceReport};
use super::AttributionDataset;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const DEFAULT_BOOTSTRAPS: usize = 100;
pub const DEFAULT_PERMUTATION_REPEATS: usize = 50;
pub const MAX_SHAPLEY_FEATURES: usize = 8;
const CI_LOW: f64 = 2.5;
const CI_HIGH: f64 = 97.5;

/// Variance reduction per feature, averaged over trees.
pub fn impurity_values(forest: &ForestModel) -> Vec<f64> {
    let mut total = vec![0.0; forest.features()];
    for tree in &forest.trees {
        for node in &tree.nodes {
            if let Node::Split { feature, gain, .. } = node {
                total[*feature] += gain;
            }
        }
    }
    total.iter().map(|v| v / forest.trees.len() as f64).collect()
}

pub fn impurity_importance(forest: &ForestModel) -> ImportanceReport {
    ImportanceReport::from_values(ImportanceMethod::Impurity, &forest.feature_names, &impurity_values(forest))
}

/// Impurity importance of a forest fit on `data`, with 95% intervals from
/// forests refit on `n_boot` row resamples.
pub fn bootstrap_importance_ci(
    data: &AttributionDataset,
    config: ForestConfig,
    n_boot: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    data.require_rows(MIN_FOREST_ROWS)?;
    if n_boot == 0 {
        return Err(Error::InvalidArgument("n_boot must be at least 1".into()));
    }
    let point = impurity_values(&fit_unchecked(data, config));
    let n = data.len();
    let samples: Vec<Vec<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = RngStream::derive(seed, b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.below(n)).collect();
            let refit = config.with_seed(rng.next_u64());
            impurity_values(&fit_unchecked(&data.subset(&idx), refit))
        })
        .collect();
    let intervals = intervals(&samples, point.len());
    Ok(ImportanceReport::from_values(ImportanceMethod::Impurity, &data.feature_names, &point).with_intervals(&intervals))
}

fn intervals(samples: &[Vec<f64>], features: usize) -> Vec<(f64, f64)> {
    (0..features)
        .map(|j| {
            let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
            (percentile(&col, CI_LOW), percentile(&col, CI_HIGH))
        })
        .collect()
}

fn mse(forest: &ForestModel, rows: &[Vec<f64>], y: &[f64]) -> f64 {
    rows.iter().zip(y).map(|(r, t)| (forest.predict(r) - t).powi(2)).sum::<f64>() / y.len() as f64
}

/// Mean increase in squared error when one feature column is shuffled.
/// Negative means are clamped to zero in `importance`; `raw` keeps them.
pub fn permutation_importance(
    forest: &ForestModel,
    data: &AttributionDataset,
    n_repeats: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    if data.is_empty() || n_repeats == 0 {
        return Err(Error::InvalidArgument("permutation importance needs rows and at least one repeat".into()));
    }
    if data.features() != forest.features() {
        return Err(Error::FeatureMismatch(format!("{} data features, {} forest features", data.features(), forest.features())));
    }
    let base = mse(forest, &data.rows, &data.target);
    let increases: Vec<Vec<f64>> = (0..data.features())
        .into_par_iter()
        .map(|j| {
            (0..n_repeats)
                .map(|r| {
                    let mut column: Vec<f64> = data.rows.iter().map(|row| row[j]).collect();
                    RngStream::derive(seed, ((j as u64) << 32) | r as u64).shuffle(&mut column);
                    let rows: Vec<Vec<f64>> = data
                        .rows
                        .iter()
                        .zip(&column)
                        .map(|(row, &v)| {
                            let mut row = row.clone();
                            row[j] = v;
                            row
                        })
                        .collect();
                    mse(forest, &rows, &data.target) - base
                })
                .collect()
        })
        .collect();
    let raw: Vec<f64> = increases.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let clamped: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let per_repeat: Vec<Vec<f64>> = (0..n_repeats).map(|r| increases.iter().map(|v| v[r]).collect()).collect();
    let mut report = ImportanceReport::from_values(ImportanceMethod::Permutation, &data.feature_names, &clamped)
        .with_intervals(&intervals(&per_repeat, raw.len()));
    report.raw = Some(raw);
    Ok(report)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Exact interventional Shapley values of every row, using all rows as the
/// background distribution. Row `i`, feature `j` is `values[i][j]`.
pub fn shapley_values(forest: &ForestModel, data: &AttributionDataset) -> Result<Vec<Vec<f64>>> {
    let p = data.features();
    if p > MAX_SHAPLEY_FEATURES {
        return Err(Error::TooManyFeatures { features: p, limit: MAX_SHAPLEY_FEATURES });
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("Shapley values need at least one row".into()));
    }
    let background = &data.rows;
    let key = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let mut predictions: HashMap<Vec<u64>, f64> = HashMap::new();
    // Expected prediction with the features in `mask` fixed to `x`.
    let mut value = |mask: usize, x: &[f64], memo: &mut HashMap<(usize, Vec<u64>), f64>| -> f64 {
        let fixed: Vec<u64> = (0..p).map(|j| if mask >> j & 1 == 1 { x[j].to_bits() } else { 0 }).collect();
        if let Some(v) = memo.get(&(mask, fixed.clone())) {
            return *v;
        }
        let mut point = vec![0.0; p];
        let mut sum = 0.0;
        for b in background {
            for j in 0..p {
                point[j] = if mask >> j & 1 == 1 { x[j] } else { b[j] };
            }
            sum += *predictions.entry(key(&point)).or_insert_with(|| forest.predict(&point));
        }
        let v = sum / background.len() as f64;
        memo.insert((mask, fixed), v);
        v
    };
    let weights: Vec<f64> = (0..p).map(|s| factorial(s) * factorial(p - s - 1) / factorial(p)).collect();
    let mut memo = HashMap::new();
    let mut out = Vec::with_capacity(data.len());
    for x in &data.rows {
        let v: Vec<f64> = (0..1usize << p).map(|mask| value(mask, x, &mut memo)).collect();
        let phi = (0..p)
            .map(|j| {
                let mut acc = 0.0;
                for mask in 0..1usize << p {
                    if mask >> j & 1 == 0 {
                        acc += weights[mask.count_ones() as usize] * (v[mask | 1 << j] - v[mask]);
                    }
                }
                acc
            })
            .collect();
        out.push(phi);
    }
    Ok(out)
}

/// Mean absolute Shapley value per feature; intervals from resampling the
/// rows (not the forest) `DEFAULT_BOOTSTRAPS` times.
pub fn shapley_importance(forest: &ForestModel, data: &AttributionDataset, seed: u64) -> Result<ImportanceReport> {
    let phi = shapley_values(forest, data)?;
    let p = data.features();
    let n = phi.len();
    let mean_abs = |rows: &mut dyn Iterator<Item = usize>| {
        let mut acc = vec![0.0; p];
        let mut count = 0;
        for i in rows {
            for j in 0..p {
                acc[j] += phi[i][j].abs();
            }
            count += 1;
        }
        acc.iter().map(|a| a / count as f64).collect::<Vec<f64>>()
    };
    let point = mean_abs(&mut (0..n));
    let samples: Vec<Vec<f64>> = (0..DEFAULT_BOOTSTRAPS)
        .map(|b| {
            let mut rng = RngStream::derive(seed, b as u64);
            mean_abs(&mut (0..n).map(move |_| rng.below(n)))
        })
        .collect();
    Ok(ImportanceReport::from_values(ImportanceMethod::Shapley, &data.feature_names, &point)
        .with_intervals(&intervals(&samples, p)))
}
