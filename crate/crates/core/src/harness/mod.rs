//! Experiment harness: config parsing, suite orchestration, and report
//! emission.

pub mod config;
pub mod report;
pub mod suite;

pub use config::{parse_config, ConfigError, FederationConfig};
pub use report::{emit_reports, resummarize_curves, ReportPaths};
pub use suite::{run_suite, AggregatorStats, ExperimentSummary, RunRecord};

/// Environment variable consulted for the default report directory.
pub const OUT_DIR_ENV: &str = "FEDBAYES_OUT_DIR";
