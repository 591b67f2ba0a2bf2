//! Experiment orchestration for reservoir forecasting with uncertainty:
//! configuration, data preparation, seeded repeated runs, grid search and
//! method comparison.

pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod pipeline;

pub use compare::{compare_methods, default_study, Comparison, ComparisonRow};
pub use config::{DataSource, ExperimentConfig, HmcSettings, Method, MethodParams, PcaSpec};
pub use error::{HarnessError, Stage};
pub use experiment::{run_experiment, run_prepared, MeanSd, MetricsSummary, RunRecord, RunReport};
pub use grid::{grid_search, Candidate, GridResult, GridSpec};
pub use pipeline::{prepare, Prepared};
