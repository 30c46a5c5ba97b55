//! File ingestion, configuration, experiment execution and the CLI.

pub mod cli;
pub mod config;
pub mod experiment;
pub mod io;

pub use config::{build_dataset, load_spec, DataConfig, DataKind, EvalConfig, ExperimentSpec};
pub use experiment::{
    evaluate, export_mask_decisions, mask_coverage, run_ablation, run_experiment, CoverageStats,
    MetricsRecord,
};

pub use io::{read_cloud, read_cloud_auto, write_xyz, CloudFormat};
