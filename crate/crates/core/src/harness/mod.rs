//! Desk-scale shift experiment: synthetic data, model training on scored
//! permutation schedules, a cross-validation baseline and the comparison.

pub mod data;
pub mod eval;
pub mod experiment;
pub mod model;

use thiserror::Error;

pub use data::{make_synthetic_shifted_dataset, w1_labels, LabeledData, SyntheticDataset, SyntheticSpec};
pub use eval::{
    adb_select, correlation_report, kfold_indices, paired_ttest, percentile_rank, AdbSelection, CorrelationReport,
    MetricSet, Metrics, ModelRecord, TTest,
};
pub use experiment::{
    kfold_cv_baseline, run_experiment, run_replicated, CvReport, EvalReport, ExperimentConfig, ReplicationReport,
    ScheduleDraw,
};
pub use model::{train_with_schedule, ModelKind, ModelSpec, TrainConfig, TrainedModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shift calibration failed: {0}")]
    Calibration(String),

    #[error("training diverged in epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("selection failed: {0}")]
    Selection(String),

    #[error("paired differences have zero variance")]
    DegenerateVariance,

    #[error("shift gate not met: OOD label W1 {ood_w1:.4}, ID label W1 {id_w1:.4}")]
    ShiftGate { ood_w1: f64, id_w1: f64 },

    #[error(transparent)]
    Sequencing(#[from] crate::sequencing::SequencingError),

    #[error(transparent)]
    Grouping(#[from] crate::grouping::GroupingError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
