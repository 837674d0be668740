//! Experiment orchestration: configuration, dataset caching, the
//! pre-train/adapt/evaluate pipeline, ablation tables, divergence reports
//! and feature dumps.

mod config;
mod data;
mod features;
mod hdist;
mod metrics;
mod run;

pub use config::{DataSizes, ExperimentConfig, HdistConfig, Mode, Overrides, SettingConfig};
pub use data::{generate_datasets, prepare_datasets, Datasets};
pub use features::{export_features, feature_header};
pub use hdist::{infer_all, measure_hdist, predicted_class, HdistEntry, HdistReport};
pub use metrics::{aggregate, aggregate_csv, read_records, AggregateRow, MetricsRecord, BASELINE};
pub use run::{
    evaluate_both, hdist_on_tests, run_ablation, run_experiment, run_pretrain, start_session,
    target_for_run, AblationRow, AblationTable, EvalSummary, ExperimentOutcome, RunOutput, Session,
    PRETRAINED_CHECKPOINT,
};
