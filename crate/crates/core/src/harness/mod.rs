//! Config-driven orchestration: teacher training, distillation, the
//! multi-batch pipeline, the on-policy baseline and the CLI.

pub mod cli;
pub mod config;
pub mod pipeline;
pub mod store;
pub mod train;

pub use cli::cli_main;
pub use config::RunConfig;
pub use pipeline::{run_pipeline, BatchReport, PipelineOutcome};
pub use store::SnapshotStore;
pub use train::{run_online, stage1_train, stage2_distill, Lab};
