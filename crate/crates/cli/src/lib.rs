//! Experiment orchestration for few-shot ECG question answering: config,
//! pipeline stages, ablation suites and report emission.

pub mod ablation;
pub mod config;
pub mod pipeline;
pub mod report;

pub use ablation::{run_ablation_suite, Suite};
pub use config::ExperimentConfig;
pub use pipeline::{run, Failure, ResultRow};
pub use report::emit_report;
