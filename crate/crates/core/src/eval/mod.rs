//! Precision, recall, and F1 under the OTHER-label modes, plus the teacher-subset ablation.

mod ablation;
mod metrics;

pub use ablation::{ablation_csv, run_ablation, table3_subsets, AblationRow, ABLATION_FILE};
pub use metrics::{
    evaluate_student, f1_score, mean, metrics, ConfusionMatrix, EvalMode, Evaluation, LabelMetrics, MetricsReport,
    CONFUSION_FILE, METRICS_FILE,
};
