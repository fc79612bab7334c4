//! Evaluation metrics and behavioural analyses.

pub mod analysis;
pub mod classification;
pub mod clustering;
pub mod ranking;

pub use analysis::{
    bucket_index, extract_revisit_events, goal_confusion_matrix, revisit_duration_buckets, single_goal_session_rate, ConfusionReport, DurationReport,
    RevisitEvent, BUCKET_BOUNDARIES, BUCKET_COUNT,
};
pub use classification::{classification_metrics, multiclass_report, ClsMetricsReport, MulticlassReport};
pub use clustering::{clustering_agreement, ClusterMetricsReport};
pub use ranking::{rank_metrics, RankMetricsReport};
