//! Experiment configuration, desk-scale data, metrics, persistence and
//! divergence diagnostics.

mod config;
mod desk;
mod diagnose;
mod experiment;
mod metrics;

pub use config::{ExperimentConfig, FedMode, ModelVariant};
pub use desk::{load_csv_dataset, DeskDataset, DeskSpec, TEMPLATE_GRID};
pub use diagnose::{diagnose_divergence, DiagnoseReport, EpochDiagnostics, LayerVariance};
pub use experiment::{
    build_setup, effective_threads, load_data, rounds_csv, run_experiment, run_seeds, run_to_dir, sweep,
    write_outputs, RunOutcome,
};
pub use metrics::{evaluate_acc, evaluate_asr, final_metrics, mean_std, predict, Summary};
