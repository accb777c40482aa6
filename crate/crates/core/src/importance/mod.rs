//! Attribution of fidelity to per-component bit widths: a random-forest
//! surrogate, impurity, permutation and exact Shapley importances, a linear
//! baseline and their consensus.

mod attribution;
mod dataset;
mod forest;
mod linear;
mod report;

pub use attribution::{
    bootstrap_importance_ci, impurity_importance, impurity_values, permutation_importance, shapley_importance,
    shapley_values, DEFAULT_BOOTSTRAPS, DEFAULT_PERMUTATION_REPEATS, MAX_SHAPLEY_FEATURES,
};
pub use dataset::AttributionDataset;
pub use forest::{fit_random_forest, r_squared, ForestConfig, ForestModel, Node, RegressionTree, MIN_FOREST_ROWS};
pub use linear::{linear_baseline_r2, LinearFit, LINEAR_DAMPING, MIN_LINEAR_ROWS};
pub use report::{
    consensus_ranking, percentages, percentile, round_preserving_sum, write_consensus_csv, ConsensusRow,
    FeatureImportance, ImportanceMethod, ImportanceReport, CONSENSUS_COLUMNS,
};
