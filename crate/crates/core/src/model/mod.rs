//! The recursive transformer.
//!
//! One small trunk (a stack of post-norm attention + feed-forward blocks) is
//! applied recursively. Each supervision step runs `higher_cycles` cycles;
//! a cycle applies the trunk `lower_cycles` times to refine the reasoning
//! latent `z` from `z + y + x`, then once to refine the answer latent `y`
//! from `y + z`. The answer latent is read out by the output head (per-cell
//! logits) and, mean-pooled, by the halting head. Latents carry over from
//! one supervision step to the next.
//!
//! Gradients flow only through the last cycle of each supervision step; the
//! latents entering it are constants.

mod checkpoint;
mod embeddings;
mod forward;
mod lora;
mod params;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrmError};
use crate::grid::{CANVAS_SIDE, VOCAB_SIZE};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use embeddings::{count_parameters, encode_explicit_augmentation, init_new_task_embeddings, EmbeddingInit, ParameterCount};
pub use forward::gradcheck;
pub use forward::argmax_tokens;
pub(crate) use forward::{cell_loss_and_grad, halt_loss_and_grad};
pub use forward::{
    compute_gradients, forward, predict_tokens, BatchStats, ForwardOutput, Gradients, LossBreakdown, ModelInput,
    Trainable,
};
pub use lora::{Adapter, LayerAdapters, LoraAdapters};
pub use params::{init_model, AugEncoders, LayerParams, ModelParams, ModelState, ParamGroup};

/// Floating point type the model runs in: `f32` for training, `f64` for
/// gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::iter::Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("finite constant")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// One embedding row per (task, augmentation) registry entry.
    PerVariant,
    /// One row per task, plus learned encodings of the augmentation.
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    /// Task embedding width; must equal `hidden_dim`.
    pub embed_dim: usize,
    pub n_trunk_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width as a multiple of `hidden_dim`.
    pub ffn_expansion: usize,
    pub lower_cycles: usize,
    pub higher_cycles: usize,
    pub supervision_steps: usize,
    /// Side of the square token canvas (30 at full scale).
    pub canvas_side: usize,
    pub embedding_mode: EmbeddingMode,
    /// At inference, stop at the first supervision step whose halt logit is positive.
    pub halt_early: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 512,
            embed_dim: 512,
            n_trunk_layers: 2,
            n_heads: 8,
            ffn_expansion: 4,
            lower_cycles: 4,
            higher_cycles: 3,
            supervision_steps: 4,
            canvas_side: CANVAS_SIDE,
            embedding_mode: EmbeddingMode::PerVariant,
            halt_early: false,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: D=64 on an 8x8 canvas with shallow recursion.
    pub fn desk() -> Self {
        ModelConfig {
            hidden_dim: 64,
            embed_dim: 64,
            n_trunk_layers: 1,
            n_heads: 4,
            ffn_expansion: 2,
            lower_cycles: 2,
            higher_cycles: 1,
            supervision_steps: 2,
            canvas_side: 8,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TrmError::ModelConfig(m));
        if self.hidden_dim == 0 || self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return err(format!("hidden_dim {} not divisible by n_heads {}", self.hidden_dim, self.n_heads));
        }
        if self.embed_dim != self.hidden_dim {
            return err(format!(
                "embed_dim {} must equal hidden_dim {}",
                self.embed_dim, self.hidden_dim
            ));
        }
        if self.lower_cycles == 0 || self.higher_cycles == 0 || self.supervision_steps == 0 {
            return err("lower_cycles, higher_cycles and supervision_steps must be at least 1".into());
        }
        if self.n_trunk_layers == 0 || self.ffn_expansion == 0 {
            return err("n_trunk_layers and ffn_expansion must be at least 1".into());
        }
        if !(1..=CANVAS_SIDE).contains(&self.canvas_side) {
            return err(format!("canvas_side {} outside 1..={CANVAS_SIDE}", self.canvas_side));
        }
        Ok(())
    }

    pub fn vocab(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn seq_len(&self) -> usize {
        self.canvas_side * self.canvas_side
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden_dim * self.ffn_expansion
    }

    /// Trunk-layer applications in one full forward pass.
    pub fn effective_depth(&self) -> usize {
        self.n_trunk_layers * self.supervision_steps * self.higher_cycles * (self.lower_cycles + 1)
    }
}
