//! End-to-end experiments: build a world and models from a JSON config,
//! run edits and sweeps over seeds, and write CSV outputs.

mod commands;
mod config;
mod pipeline;
pub mod stats;

pub use commands::{cmd_train, write_error_record, CellResult, Contrast, Session, Summary, SweepOutput, TrainSummary};
pub use config::{DenoiserChoice, DenoiserKind, ExperimentConfig, GuidanceSettings, WorldConfig};
pub use pipeline::{
    prepare, run_method, write_video_csv, EditOutcome, InvertedBranch, Method, Models, Prepared, World,
};
