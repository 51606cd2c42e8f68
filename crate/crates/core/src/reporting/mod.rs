//! Experiment configuration, multi-seed sweeps and report layouts.

mod config;
mod render;
mod sweep;

pub use config::{parse_config, parse_config_str, ExperimentConfig, ReportOptions, SweepConfig};
pub use render::{render_report, write_report, Layout};
pub use sweep::{
    aggregate_runs, read_bundle, reduced_sweep, row_values, summarize, sweep, AggregateRow, BundleKind, BundleProvenance, RunFailure,
    RunReportBundle,
};
