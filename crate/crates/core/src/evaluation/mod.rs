//! Representation quality metrics and multi-task scoring.

mod delta;
mod knn;
mod optimal;
mod permutation;
mod trend;
mod universality;

pub use delta::{delta_mtl, DeltaMtlInput};
pub use knn::{knn_classify, knn_probe, knn_regress, nearest, vote, ProbeScore};
pub use optimal::{fit_head, fit_optimal_predictor, FitBudget, OptimalFit};
pub use permutation::{
    assignment_cost, exhaustive_assignment, hungarian, min_permutation_loss, min_permutation_loss_exhaustive,
    min_permutation_loss_hungarian, permutation_cost_matrix, PermutationLoss, EXHAUSTIVE_MAX_CLASSES,
};
pub use trend::{ranks, spearman, theorem_trend_check, trend_over_encoders, TrendFamily, TrendResult, TrendSample, TrendTask};
pub use universality::{
    universality, universality_on, UniversalityMode, UniversalityReport, DEGENERATE_GAP, UNIVERSALITY_EPSILON,
};
