//! Evaluation: metrics, LOSO folds, protocol label mappings, and the
//! protocol runner with its report formats.

pub mod metrics;
pub mod protocol;
pub mod runner;

pub use metrics::{acc, uar, uf1, ConfusionMatrix};
pub use protocol::{loso_splits, map_labels, Fold, MappedManifest, Protocol};
pub use runner::{run_protocol, save_report, EvalOptions, FoldReport, MetricsRow, Report};
