//! Experiment orchestration: JSON-configured runs over many seeds, CSV
//! output with a reproducibility manifest, and cross-seed summaries.

pub mod aggregate;
pub mod config;
pub mod run;

pub use aggregate::{
    aggregate, aggregate_records, plot_data, read_records, read_records_file, write_plot_data,
    write_summary, PlotRow, SummaryRow,
};
pub use config::{
    AgentSpec, ClassSpec, DreemInstance, DreemSpec, ExperimentConfig, PolicyClassSpec,
};
pub use run::{
    resolve_out_dir, run_experiment, sha256_hex, write_records, RunManifest, RunOptions,
    RunOutcome, RunStatus,
};
