//! Per-class evaluation, confidence intervals over repeated runs, and
//! table rendering.

mod aggregate;
mod classify;
mod report;

pub use aggregate::{aggregate_ci, CiMethod, Interval};
pub use classify::{
    accuracy, auc_ovr, confusion, cross_coarse_mass, cross_coarse_rows, evaluate_bundle, per_class_accuracy,
    precision_recall_f1, roc_points, ClassMetrics, ConfusionMatrix, PredictionBundle, Prf, RunMetrics,
};
pub use report::{summarize, Metric, MetricRow, MetricsReport, ModelSummary};
