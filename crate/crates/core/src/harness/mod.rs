//! Experiment configuration, orchestration, persistence and plotting.

pub mod config;
pub mod plot;
pub mod run;

pub use config::{ExperimentConfig, ExperimentKind, FeatureKind, Instance, RewardKind};
pub use run::{compare, compare_report, run_experiment, summarize, CompareReport, ExperimentOutput, RunArtifact, Task, TraceSummary};
