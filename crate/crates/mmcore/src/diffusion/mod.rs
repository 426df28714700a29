//! Flow-matching diffusion head over interleaved sequences: block layouts,
//! the block-causal diffusion-forcing mask, dual-pathway conditioning with
//! independent embedding dropout, the flow objective, and Euler sampling.

pub mod flow;
pub mod head;
pub mod layout;

pub use flow::{
    euler_sample, flow_loss, ConditionalSampler, FlowState, FlowStats, TimeSampler, VelocityField,
};
pub use head::{
    DiffusionHead, DiffusionHeadConfig, DropoutPolicy, FrameConditioning, FrameInput, PathwayDrop,
    SequenceConditioning,
};
pub use layout::{
    build_mask, build_mask_with, select_targets, supervised_token_fraction, BlockKind,
    LayoutBlock, MaskOptions, SequenceLayout, TargetMode,
};
