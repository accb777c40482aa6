use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImportanceMethod {
    Impurity,
    Permutation,
    Shapley,
    Consensus,
}

impl fmt::Display for ImportanceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImportanceMethod::Impurity => "impurity",
            ImportanceMethod::Permutation => "permutation",
            ImportanceMethod::Shapley => "shapley",
            ImportanceMethod::Consensus => "consensus",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub name: String,
    pub importance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Share of the total, in percent.
    pub pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub method: ImportanceMethod,
    pub features: Vec<FeatureImportance>,
    /// Set when every importance is zero and `pct` is a uniform placeholder.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
    /// Unclamped values, when `importance` was clamped at zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<Vec<f64>>,
}

/// Percent shares of non-negative values; uniform (and `true`) when all are
/// zero.
pub fn percentages(values: &[f64]) -> (Vec<f64>, bool) {
    let total: f64 = values.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 || !total.is_finite() {
        return (vec![100.0 / values.len() as f64; values.len()], true);
    }
    (values.iter().map(|v| 100.0 * v.max(0.0) / total).collect(), false)
}

/// Linear-interpolated percentile of `values` (`p` in 0..=100).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl ImportanceReport {
    /// Report with `pct` derived from `importance` and CIs collapsed onto the
    /// point estimate.
    pub fn from_values(method: ImportanceMethod, names: &[String], values: &[f64]) -> Self {
        let (pct, degenerate) = percentages(values);
        let features = names
            .iter()
            .zip(values)
            .zip(pct)
            .map(|((name, &v), pct)| FeatureImportance { name: name.clone(), importance: v, ci_low: v, ci_high: v, pct })
            .collect();
        Self { method, features, degenerate, raw: None }
    }

    /// Sets each feature's interval, widened if needed so it contains the
    /// point estimate.
    pub fn with_intervals(mut self, intervals: &[(f64, f64)]) -> Self {
        for (f, &(lo, hi)) in self.features.iter_mut().zip(intervals) {
            f.ci_low = lo.min(f.importance);
            f.ci_high = hi.max(f.importance);
        }
        self
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn importances(&self) -> Vec<f64> {
        self.features.iter().map(|f| f.importance).collect()
    }

    pub fn pcts(&self) -> Vec<f64> {
        self.features.iter().map(|f| f.pct).collect()
    }

    pub fn get(&self, name: &str) -> Option<&FeatureImportance> {
        self.features.iter().find(|f| f.name == name)
    }

    /// Feature names from most to least important.
    pub fn ranking(&self) -> Vec<String> {
        let mut order: Vec<&FeatureImportance> = self.features.iter().collect();
        order.sort_by(|a, b| b.pct.total_cmp(&a.pct));
        order.into_iter().map(|f| f.name.clone()).collect()
    }
}

/// Mean of the methods' percentage vectors, ranked descending. Each
/// feature's interval spans the methods' percentages.
pub fn consensus_ranking(reports: &[ImportanceReport]) -> Result<ImportanceReport> {
    let first = reports.first().ok_or_else(|| Error::InvalidArgument("consensus needs at least one report".into()))?;
    let names = first.names();
    for r in reports {
        if r.names() != names {
            return Err(Error::FeatureMismatch(format!("{:?} vs {:?}", r.names(), names)));
        }
    }
    let mut features: Vec<FeatureImportance> = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let vals: Vec<f64> = reports.iter().map(|r| percentages(&r.pcts()).0[j]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            FeatureImportance {
                name: name.clone(),
                importance: mean,
                ci_low: vals.iter().copied().fold(f64::INFINITY, f64::min),
                ci_high: vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                pct: mean,
            }
        })
        .collect();
    features.sort_by(|a, b| b.pct.total_cmp(&a.pct));
    Ok(ImportanceReport {
        method: ImportanceMethod::Consensus,
        features,
        degenerate: reports.iter().all(|r| r.degenerate),
        raw: None,
    })
}

/// Largest-remainder rounding to `decimals` places; the rounded values add
/// up to the rounded total.
pub fn round_preserving_sum(values: &[f64], decimals: u32) -> Vec<f64> {
    let scale = 10f64.powi(decimals as i32);
    let target = (values.iter().sum::<f64>() * scale).round() as i64;
    let mut floors: Vec<i64> = values.iter().map(|v| (v * scale).floor() as i64).collect();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = values[a] * scale - floors[a] as f64;
        let rb = values[b] * scale - floors[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = target - floors.iter().sum::<i64>();
    for &i in order.iter().cycle().take(values.len() * 2) {
        if missing <= 0 {
            break;
        }
        floors[i] += 1;
        missing -= 1;
    }
    floors.iter().map(|&f| f as f64 / scale).collect()
}

/// Columns of the consensus table; component columns follow the order
/// vision, connector, language.
pub const CONSENSUS_COLUMNS: [&str; 6] = ["Model", "Method", "Dataset", "ViT", "QFormer", "LLM"];

/// One consensus table row; `None` marks a component the pipeline lacks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusRow {
    pub model: String,
    pub method: String,
    pub dataset: String,
    pub vision: Option<f64>,
    pub connector: Option<f64>,
    pub language: Option<f64>,
}

impl ConsensusRow {
    pub fn from_report(model: &str, method: &str, dataset: &str, report: &ImportanceReport) -> Result<Self> {
        if report.method != ImportanceMethod::Consensus {
            return Err(Error::InvalidArgument(format!("expected a consensus report, got {}", report.method)));
        }
        let known = ["vision", "connector", "language"];
        if let Some(f) = report.features.iter().find(|f| !known.contains(&f.name.as_str())) {
            return Err(Error::FeatureMismatch(format!("unknown component feature '{}'", f.name)));
        }
        let pct = |name: &str| report.get(name).map(|f| f.pct);
        Ok(Self {
            model: model.into(),
            method: method.into(),
            dataset: dataset.into(),
            vision: pct("vision"),
            connector: pct("connector"),
            language: pct("language"),
        })
    }

    /// Present shares rounded to two decimals, summing to exactly 100.
    pub fn cells(&self) -> [String; 3] {
        let present: Vec<f64> = [self.vision, self.connector, self.language].into_iter().flatten().collect();
        let mut rounded = round_preserving_sum(&present, 2).into_iter();
        [self.vision, self.connector, self.language]
            .map(|v| v.map_or_else(|| "--".to_string(), |_| format!("{:.2}", rounded.next().expect("one per present"))))
    }
}

pub fn write_consensus_csv<W: Write>(rows: &[ConsensusRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CONSENSUS_COLUMNS)?;
    for r in rows {
        let [v, c, l] = r.cells();
        w.write_record([r.model.as_str(), &r.method, &r.dataset, &v, &c, &l])?;
    }
    w.flush()?;
    Ok(())
}
