//! Two-stage training pipeline: backbone alignment, diffusion-head
//! continued pre-training, and the short SFT pass, with Adam, optional EMA,
//! bit-exact checkpoints, divergence recovery, and token-budget accounting.

mod adam;
mod checkpoint;
mod config;
mod stages;

pub use adam::{Adam, AdamConfig, Ema};
pub use checkpoint::Checkpoint;
pub use config::{Stage, TrainConfig};
pub use stages::{
    conditioning_for, prompt_sequence, sample_frame, split_dataset, train_sft, train_stage1,
    train_stage2, LogRecord, PipelineState, RunControl, SampleOutput, StageOutcome,
};
