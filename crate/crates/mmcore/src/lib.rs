//! Desk-scale unified multimodal generation stack.
//!
//! A small autoregressive multimodal backbone distills compact visual
//! latent embeddings through learnable query tokens; a rectified-flow
//! diffusion head consumes them through dual text/visual conditioning
//! pathways under a block-causal attention mask over interleaved text-image
//! sequences. The crate ships the whole loop: synthetic data with exact
//! alignment oracles, a scratch f64 tensor library with reverse-mode
//! differentiation and finite-difference checking, the two-stage training
//! pipeline with checkpointing and EMA, deterministic proxy judges, and an
//! ablation harness with directional hypothesis checks.
//!
//! Start from the runnable programs in `examples/`, or the `mmcore` binary
//! for the command-line workflow.

pub mod alignment;
pub mod codec;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod mask;
pub mod mllm;
pub mod params;
pub mod pgm;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod vision;

pub use error::{Error, Result};
