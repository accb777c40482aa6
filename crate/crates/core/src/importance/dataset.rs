use crate::error::{Error, Result};
use crate::experiments::{ResultsTable, UNQUANTIZED_BITS};
use crate::pipeline::{ComponentId, QuantMethod, TaskKind};

/// Regression data for attribution: one row per grid cell, one feature per
/// component's bit width.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionDataset {
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    pub run_ids: Vec<String>,
}

impl AttributionDataset {
    pub fn new(feature_names: Vec<String>, rows: Vec<Vec<f64>>, target: Vec<f64>) -> Result<Self> {
        let run_ids = (0..rows.len()).map(|i| format!("row{i}")).collect();
        Self::with_ids(feature_names, rows, target, run_ids)
    }

    pub fn with_ids(feature_names: Vec<String>, rows: Vec<Vec<f64>>, target: Vec<f64>, run_ids: Vec<String>) -> Result<Self> {
        if rows.len() != target.len() || rows.len() != run_ids.len() {
            return Err(Error::ShapeMismatch(format!("{} rows, {} targets, {} ids", rows.len(), target.len(), run_ids.len())));
        }
        if feature_names.is_empty() {
            return Err(Error::InvalidArgument("dataset needs at least one feature".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != feature_names.len() {
                return Err(Error::ShapeMismatch(format!("row {i} has {} features, expected {}", r.len(), feature_names.len())));
            }
            if let Some(c) = r.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: i, col: c });
            }
        }
        if let Some(i) = target.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i, col: feature_names.len() });
        }
        Ok(Self { feature_names, rows, target, run_ids })
    }

    /// Rows of `task` (optionally one method) with a bit-width feature per
    /// component. Components that are never quantized in the slice are
    /// dropped rather than kept as constant columns.
    pub fn from_results(table: &ResultsTable, task: TaskKind, method: Option<QuantMethod>) -> Result<Self> {
        let records: Vec<_> =
            table.records.iter().filter(|r| r.task == task && method.is_none_or(|m| r.method == m)).collect();
        let components: Vec<ComponentId> = ComponentId::ALL
            .iter()
            .copied()
            .filter(|&c| records.iter().any(|r| r.bits(c) < UNQUANTIZED_BITS))
            .collect();
        let components = if components.is_empty() { ComponentId::ALL.to_vec() } else { components };
        Self::with_ids(
            components.iter().map(|c| c.to_string()).collect(),
            records.iter().map(|r| components.iter().map(|&c| r.bits(c) as f64).collect()).collect(),
            records.iter().map(|r| r.score).collect(),
            records.iter().map(|r| r.run_id.clone()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn require_rows(&self, needed: usize) -> Result<()> {
        if self.len() < needed {
            return Err(Error::NotEnoughRows { needed, available: self.len() });
        }
        Ok(())
    }

    /// Copy with every target multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self { target: self.target.iter().map(|y| y * c).collect(), ..self.clone() }
    }

    /// Copy made of the given rows, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            feature_names: self.feature_names.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            target: indices.iter().map(|&i| self.target[i]).collect(),
            run_ids: indices.iter().map(|&i| self.run_ids[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::CellKey;
    use crate::pipeline::{BlockGroup, LayerType, PipelineSpec};

    #[test]
    fn absent_components_are_dropped() {
        let rec = |bits: [u8; 3], score: f64| {
            CellKey {
                method: QuantMethod::Gptq,
                task: TaskKind::Vqa,
                bits,
                groups: BlockGroup::ALL.iter().copied().collect(),
                layer_types: LayerType::ALL.iter().copied().collect(),
                group_size: 128,
                seed: 1,
            }
            .record(&PipelineSpec::default(), 8.0, score, 0)
        };
        let table = ResultsTable::new(vec![rec([4, 16, 2], 0.5), rec([16, 16, 8], 0.9), rec([3, 16, 16], 0.7)]);
        let d = AttributionDataset::from_results(&table, TaskKind::Vqa, None).unwrap();
        assert_eq!(d.feature_names, vec!["vision", "language"]);
        assert_eq!(d.len(), 3);
        assert!(d.rows.iter().all(|r| r.len() == 2));
        assert!(AttributionDataset::from_results(&table, TaskKind::Vqa, Some(QuantMethod::Awq)).unwrap().is_empty());
    }

    #[test]
    fn validation() {
        assert!(AttributionDataset::new(vec!["a".into()], vec![vec![1.0, 2.0]], vec![0.0]).is_err());
        assert!(AttributionDataset::new(vec!["a".into()], vec![vec![1.0]], vec![]).is_err());
        assert!(AttributionDataset::new(vec!["a".into()], vec![vec![f64::NAN]], vec![0.0]).is_err());
    }
}
