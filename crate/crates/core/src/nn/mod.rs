//! Minimal reverse-mode differentiation over a recorded operation tape, the
//! layers needed for a pre-norm Transformer encoder, AdamW and checkpoints.

mod checkpoint;
mod graph;
mod layers;
mod optim;
mod tensor;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use graph::{Graph, Var};
pub use layers::{
    layer_norm, linear, multi_head_self_attention, Conv2d, EncoderBlock, FeedForward, LayerNorm, Linear,
    MultiHeadAttention,
};
pub use optim::{adamw_step, AdamW, AdamWConfig, AdamWState};
pub use tensor::{ParamGrads, ParamId, ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model width {d_model} is not divisible by {heads} heads")]
    IndivisibleHeads { d_model: usize, heads: usize },
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
