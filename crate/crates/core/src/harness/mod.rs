//! Experiment configuration, runs, sweeps and CSV comparison.

pub mod compare;
pub mod config;
pub mod metrics;
pub mod runner;

pub use compare::{compare, ComparisonReport};
pub use config::ExperimentConfig;
pub use metrics::{parse_metrics, read_metrics, MetricsRow, METRICS_COLUMNS};
pub use runner::{
    run, run_file, summarize, sweep, PolicySummary, RunReport, SweepParam, SweepPoint,
};
