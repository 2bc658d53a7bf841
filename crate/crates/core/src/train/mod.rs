//! Staged training: an optional base pretraining stage, vocabulary
//! extension, then gist warmup with everything else frozen, full finetuning
//! and a linearly decayed cold-down.

mod config;
mod pipeline;
mod stage;

pub use config::{lr_at, AdamWConfig, Freeze, Schedule, StageConfig, StageName};
pub use pipeline::{
    boundary_dir, metrics_csv, run_pipeline, ModelSpec, PipelineOptions, PipelineResult, TrainConfig,
    TRAIN_SCHEMA,
};
pub use stage::{batch_indices, make_windows, run_stage, MetricRow, StageSummary, TrainState, METRICS_HEADER};
