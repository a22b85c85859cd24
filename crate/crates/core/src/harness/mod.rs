//! Nested cross-validation, metrics, significance testing and attention export.

mod attention;
mod experiment;
mod folds;
mod metrics;
mod stats;
mod train;

pub use attention::{
    subject_attention, AttentionMaps, SubjectAttention, CLINICAL_GENETICS_CSV, CLINICAL_IMAGING_CSV,
    IMAGING_GENETICS_CSV,
};
pub use experiment::{
    build_report, derive_seed, read_external_predictions, run_experiment, score_external, score_fold_model,
    train_all_folds, train_outer_fold, ExperimentSettings, FoldModel, FoldModelMeta, FoldResult, GridPoint,
    HarnessConfig, MetricsReport, ModelReport, ModelSpec, RuntimeMetadata,
};
pub use folds::{make_fold_plan, FoldPlan, InnerFold, OuterFold};
pub use metrics::{auroc_ovo, OvoAuroc};
pub use stats::{paired_ttest, TTest};
pub use train::{
    evaluate, prepare_examples, train_model, CheckpointRule, EpochRecord, Example, Loss, TrainConfig,
    TrainMetadata, TrainOutcome,
};
