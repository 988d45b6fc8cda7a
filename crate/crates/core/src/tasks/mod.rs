//! End-to-end experiment drivers producing machine-readable reports.

pub mod bench;
pub mod config;
pub mod feature_selection;
pub mod node_sparsity;
pub mod lasso;
pub mod mlp;
pub mod sparse_coding;
pub mod data;
pub mod train;

pub use config::{RunStatus, SolveReport, Trace, TrainConfig};
pub use train::{base_report, train, TrainOutcome};
