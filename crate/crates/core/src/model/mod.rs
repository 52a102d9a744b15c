//! Decoder-only transformer with exact forward/backward passes, per-head
//! attention tracing, and head masking.
//!
//! All weights live in one flat buffer (see [`ParamLayout`]). Linear weights
//! are stored input-major: entry `(i, o)` of a projection multiplies input
//! feature `i` into output feature `o`. For the attention output projection
//! this means the column block of head `h` in the usual `W_o` orientation
//! (`[d_model_out, d_model_in]`) is the contiguous row range
//! `h * d_head .. (h + 1) * d_head` of the stored tensor.

mod backward;
mod checkpoint;
mod config;
mod decode;
mod forward;
mod kernels;
mod mask;
mod objective;
mod params;

pub use backward::{backward, Tape};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, PositionalScheme};
pub use decode::{
    decode, decode_with, AttentionTrace, CachePolicy, DecodeConfig, DecodeMode, Generation,
    HeadAttention, TraceStep,
};
pub use forward::{forward, forward_tape, AttentionMaps, ForwardOutput, KvCache};
pub use mask::{apply_head_mask, HeadId, HeadMask};
pub(crate) use objective::{backprop_targets, target_logprob, target_tape};
pub use objective::{
    loss_and_grads, sequence_logprob, token_logprobs, Example, LossAndGrads, Objective, TokenWeight,
};
pub use params::{ModelParams, ParamLayout, TensorKind, TensorSpec};

use num_traits::{Float, NumAssign};
use std::fmt::{Debug, Display};

/// Floating-point element type the model can run in.
///
/// Training and inference use `f32`; the gradient oracle runs the same code
/// in `f64`.
pub trait Real: Float + NumAssign + Default + Debug + Display + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Token id.
pub type Token = u32;

pub(crate) fn check_tokens(config: &ModelConfig, tokens: &[Token]) -> crate::Result<()> {
    if tokens.len() > config.max_seq_len {
        return Err(crate::Error::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(crate::Error::InvalidToken {
            token: bad,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}
