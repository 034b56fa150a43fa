//! Metrics, balanced error-category subsets, prevalence-weighted accuracy
//! and leave-one-subject-out evaluation.

mod cv;
mod metrics;
mod subset;
mod weighted;

pub use cv::{
    check_leakage, fold_dir, predict_cases, run_cv, run_fold, save_fold, split_fold,
    write_aggregate_csv, write_predictions_csv, CasePrediction, CvReport, FoldOutcome, FoldReport,
    FoldSplit, AGGREGATE_FILE, CALIBRATION_FILE, CHECKPOINT_FILE, CV_REPORT_FILE, FOLD_REPORT_FILE,
    HISTORY_FILE, PREDICTIONS_FILE, SPLIT_FILE,
};
pub use metrics::{
    auc, compute_metrics, AggregateReport, ConfusionCounts, ErrorCategory, Metric, MetricReport,
    MetricSummary,
};
pub use subset::{balanced_subset, BalancedSubset};
pub use weighted::{
    weighted_accuracy, weighted_accuracy_available, PrevalenceWeights, WeightedAccuracy,
};
