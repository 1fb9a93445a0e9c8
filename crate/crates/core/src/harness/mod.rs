//! Experiment harness: config files, runs, CSV output and comparisons.

pub mod compare;
pub mod config;
pub mod output;
pub mod run;

pub use compare::{bytes_to_reach, compare, compare_runs, Comparison, CurvePoint, RunData, SummaryRow};
pub use config::{validate_config, ExperimentConfig, Issue, ValidationReport};
pub use output::{read_evals, read_rounds, CsvSink};
pub use run::{run_experiment, RunOptions, RunSummary, TransportMode};
