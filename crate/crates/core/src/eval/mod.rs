//! Fold schemes, metrics and the cross-validation driver.

pub mod cv;
pub mod folds;
pub mod metrics;
pub mod report;

pub use cv::{build_report, check_labels, group_digest, record_metrics, run_cv, run_cv_with, run_split, CvConfig, CvRun, FoldOutput, FoldRun, FoldSeeds, POSITIVE_CLASS};
pub use folds::{assign_folds, louo_folds, loso_folds, roster, stratified_kfold, Fold, FoldAssignment, RosterEntry, Scheme};
pub use metrics::{
    average_ranks, binary_metrics, mean_component_rho, mean_std, pearson, roc_auc, spearman, wilcoxon_one_sided,
    BinaryMetrics, WilcoxonResult,
};
pub use report::{fmt_sig, FoldMetrics, MetricsReport, Summary};
