//! A pre-norm decoder-only transformer over image patches and text tokens.
//!
//! Weights live in one flat buffer (see [`Params`]). Activations are row
//! vectors: a projection is `x W` with `W` stored `in x out`. Head `h` owns
//! columns `h*dh..(h+1)*dh` of the query, key, value and concatenated head
//! outputs, and the matching rows of `W_O`.

mod backward;
mod checkpoint;
mod config;
mod forward;
pub mod linalg;
mod params;
mod sequence;
mod train;

pub use backward::{loss, loss_and_grad, loss_sft, LossBreakdown};
pub use checkpoint::{load_checkpoint, load_moments, save_checkpoint, sidecar_path, CheckpointMeta};
pub use config::{ModelConfig, FRAME_TOKENS, MAX_PROMPT_TOKENS};
pub use forward::{
    forward, generate_answer, unembed, ActivationTrace, Capture, ForwardOutput, HeadId, HeadPatch, OverrideSet,
};
pub use params::{LayerLayout, Layout, Params, Slot};
pub use sequence::{build_sequence, Segment, TokenSequence};
pub use train::{lr_at, train, OptimizerConfig, TrainExample, TrainReport};
