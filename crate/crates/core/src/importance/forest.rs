use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AttributionDataset;
use crate::error::Result;
use crate::numerics::RngStream;

/// Relative variance reduction below which a split is not worth making.
const MIN_RELATIVE_GAIN: f64 = 1e-12;
/// Candidate splits closer than this (relative to the parent's squared
/// error) count as ties and keep the earlier candidate.
const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub min_leaf: usize,
    /// Fit each tree on a same-size resample drawn with replacement.
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { n_trees: 100, min_leaf: 2, bootstrap: true, seed: 0 }
    }
}

impl ForestConfig {
    /// A single fully grown tree on the unresampled data.
    pub fn debug_tree() -> Self {
        Self { n_trees: 1, min_leaf: 1, bootstrap: false, seed: 0 }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        /// Drop in summed squared error, divided by the tree's sample count.
        gain: f64,
    },
    Leaf {
        value: f64,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

fn sse(values: impl Iterator<Item = f64> + Clone) -> (f64, usize) {
    let (sum, n) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        return (0.0, 0);
    }
    let mean = sum / n as f64;
    (values.map(|v| (v - mean) * (v - mean)).sum(), n)
}

struct Builder<'a> {
    data: &'a AttributionDataset,
    min_leaf: usize,
    total: f64,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let value = idx.iter().map(|&i| self.data.target[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(Node::Leaf { value, count: idx.len() });
        self.nodes.len() - 1
    }

    /// Best (feature, threshold) by summed child squared error. Among
    /// candidates within the tie tolerance of the minimum, the first in
    /// (feature, threshold) order wins.
    fn best_split(&self, idx: &[usize], parent: f64) -> Option<(usize, f64)> {
        let n = idx.len();
        let mut candidates: Vec<(f64, usize, f64)> = Vec::new();
        // Running sums over targets centred on the node mean.
        let mean = idx.iter().map(|&i| self.data.target[i]).sum::<f64>() / n as f64;
        let mut order: Vec<(f64, f64)> = Vec::with_capacity(n);
        for f in 0..self.data.features() {
            order.clear();
            order.extend(idx.iter().map(|&i| (self.data.rows[i][f], self.data.target[i] - mean)));
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (total_sum, total_sq) = order.iter().fold((0.0, 0.0), |(s, q), &(_, y)| (s + y, q + y * y));
            let (mut ls, mut lq) = (0.0, 0.0);
            for k in 1..n {
                let y = order[k - 1].1;
                ls += y;
                lq += y * y;
                if order[k].0 == order[k - 1].0 || k < self.min_leaf || n - k < self.min_leaf {
                    continue;
                }
                let (rs, rq) = (total_sum - ls, total_sq - lq);
                let cost = (lq - ls * ls / k as f64) + (rq - rs * rs / (n - k) as f64);
                candidates.push((cost, f, 0.5 * (order[k - 1].0 + order[k].0)));
            }
        }
        let min = candidates.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        candidates.into_iter().find(|c| c.0 <= min + TIE_TOLERANCE * parent).map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, idx: Vec<usize>) -> usize {
        let y = |i: &usize| self.data.target[*i];
        let first = self.data.target[idx[0]];
        if idx.iter().all(|i| self.data.target[*i] == first) {
            self.nodes.push(Node::Leaf { value: first, count: idx.len() });
            return self.nodes.len() - 1;
        }
        let (parent, n) = sse(idx.iter().map(y));
        if n < 2 * self.min_leaf.max(1) || parent <= 0.0 {
            return self.leaf(&idx);
        }
        let Some((feature, threshold)) = self.best_split(&idx, parent) else {
            return self.leaf(&idx);
        };
        let (left, right): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.data.rows[i][feature] <= threshold);
        let gain = parent - sse(left.iter().map(y)).0 - sse(right.iter().map(y)).0;
        if gain <= MIN_RELATIVE_GAIN * parent {
            return self.leaf(&idx);
        }
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0, count: 0 });
        let l = self.grow(left);
        let r = self.grow(right);
        self.nodes[at] = Node::Split { feature, threshold, left: l, right: r, gain: gain / self.total };
        at
    }
}

impl RegressionTree {
    /// Fits on the dataset rows listed in `idx` (repeats allowed).
    pub fn fit(data: &AttributionDataset, idx: Vec<usize>, min_leaf: usize) -> Self {
        let mut b = Builder { data, min_leaf: min_leaf.max(1), total: idx.len() as f64, nodes: Vec::new() };
        b.grow(idx);
        Self { nodes: b.nodes }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value, .. } => return *value,
                Node::Split { feature, threshold, left, right, .. } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<RegressionTree>,
    /// Seed of each tree's bootstrap stream.
    pub tree_seeds: Vec<u64>,
    pub feature_names: Vec<String>,
    pub config: ForestConfig,
}

pub const MIN_FOREST_ROWS: usize = 10;

/// Random forest with exhaustive splits over every feature.
pub fn fit_random_forest(data: &AttributionDataset, config: ForestConfig) -> Result<ForestModel> {
    data.require_rows(MIN_FOREST_ROWS)?;
    Ok(fit_unchecked(data, config))
}

pub(crate) fn fit_unchecked(data: &AttributionDataset, config: ForestConfig) -> ForestModel {
    let n = data.len();
    let tree_seeds: Vec<u64> = (0..config.n_trees).map(|t| RngStream::derive(config.seed, t as u64).next_u64()).collect();
    let trees = tree_seeds
        .par_iter()
        .map(|&s| {
            let idx = if config.bootstrap {
                let mut rng = RngStream::new(s);
                (0..n).map(|_| rng.below(n)).collect()
            } else {
                (0..n).collect()
            };
            RegressionTree::fit(data, idx, config.min_leaf)
        })
        .collect();
    ForestModel { trees, tree_seeds, feature_names: data.feature_names.clone(), config }
}

impl ForestModel {
    pub fn features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_all(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().map(|r| self.predict(r)).collect()
    }

    /// Training-set coefficient of determination.
    pub fn r2(&self, data: &AttributionDataset) -> f64 {
        r_squared(&data.target, &self.predict_all(&data.rows))
    }
}

/// `1 − SS_res / SS_tot`, with 0 for a constant target.
pub fn r_squared(y: &[f64], pred: &[f64]) -> f64 {
    let (tot, _) = sse(y.iter().copied());
    if tot <= 0.0 {
        return 0.0;
    }
    let res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum();
    1.0 - res / tot
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn constant_target_gives_single_leaves() {
        let d = grid(|_, _, _| 0.4);
        let f = fit_random_forest(&d, ForestConfig::default()).unwrap();
        assert!(f.trees.iter().all(|t| t.nodes.len() == 1));
        let first = f.predict(&d.rows[0]);
        assert!((first - 0.4).abs() < 1e-12);
        assert!(d.rows.iter().all(|r| f.predict(r) == first));
    }

    #[test]
    fn debug_tree_interpolates_distinct_rows() {
        let d = grid(|a, b, c| (a * 0.37 + b * b * 0.01 - c.sqrt()).sin());
        let f = fit_random_forest(&d, ForestConfig::debug_tree()).unwrap();
        for (r, y) in d.rows.iter().zip(&d.target) {
            assert_eq!(f.predict(r), *y);
        }
    }

    #[test]
    fn step_function_fits() {
        let d = grid(|_, _, l| if l >= 4.0 { 1.0 } else { 0.0 });
        let f = fit_random_forest(&d, ForestConfig::default()).unwrap();
        assert!(f.r2(&d) >= 0.95);
        for t in &f.trees {
            assert!(t.split_features().all(|s| s == 2));
        }
    }

    #[test]
    fn splits_reduce_variance_and_leaves_are_means() {
        let d = grid(|a, b, _| a * 0.1 + if b > 4.0 { 0.5 } else { 0.0 });
        let f = fit_random_forest(&d, ForestConfig { n_trees: 5, ..ForestConfig::default() }).unwrap();
        for t in &f.trees {
            for n in &t.nodes {
                match n {
                    Node::Split { gain, .. } => assert!(*gain > 0.0),
                    Node::Leaf { count, .. } => assert!(*count >= 2),
                }
            }
        }
    }

    #[test]
    fn deterministic_and_row_minimum() {
        let d = grid(|a, b, c| a * b / (c + 1.0));
        let cfg = ForestConfig { n_trees: 10, ..ForestConfig::default() }.with_seed(3);
        assert_eq!(fit_random_forest(&d, cfg).unwrap(), fit_random_forest(&d, cfg).unwrap());
        let few = d.subset(&[0, 1, 2]);
        assert!(fit_random_forest(&few, cfg).is_err());
    }
}
