//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes.
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An attention row is left with no permitted key position.
    #[error("attention row {row} has no permitted positions")]
    FullyMaskedRow { row: usize },

    /// A caller broke an operation's contract (non-scalar loss, empty
    /// target set, unsupervised batch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An input row is degenerate (zero norm) where a direction is required.
    #[error("degenerate input: row {row} of {what} has zero norm")]
    DegenerateInput { what: &'static str, row: usize },

    /// Sequence does not fit the model context.
    #[error("sequence needs {required} positions but the context limit is {limit}")]
    Capacity { required: usize, limit: usize },

    /// Invalid configuration (geometry, probabilities, stage fields).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed on-disk artifact. `offset` is the byte position at which
    /// the failing read began.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// A leaf still holds a gradient from a previous backward pass.
    /// Gradients must be consumed or reset between passes.
    #[error("gradient already present on a leaf tensor; reset grads between backward passes")]
    GradNotReset,

    /// A malformed attention layout.
    #[error("topology error: {0}")]
    Topology(String),

    /// Checkpoint/state integrity violation (digest mismatch, frozen drift).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Training produced a non-finite loss. The last finite state was saved.
    #[error("training diverged at step {step}; last good checkpoint at {checkpoint}")]
    Diverged { step: u64, checkpoint: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 usage/config, 3 I/O and format,
    /// 1 everything else (checks, contracts, integrity).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) | Error::Format { .. } => 3,
            _ => 1,
        }
    }
}
