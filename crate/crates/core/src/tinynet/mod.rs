//! A desk-scale video masked autoencoder.
//!
//! Clips are cut into tubes, embedded linearly with learned positions and
//! passed through pre-norm transformer blocks that attend jointly over space
//! and time. Pretraining reconstructs the per-tube-normalized pixels of the
//! masked tubes from the visible ones. For classification the encoder output
//! is split into tokens inside and outside the motion box; a multi-head
//! cross-attention layer lets the inner tokens query the outer ones and the
//! mean of the fused tokens feeds a linear classifier.
//!
//! Everything is differentiated by the small reverse-mode [`tape`]. The
//! network is generic over [`Scalar`] so gradients can be checked in `f64`
//! while training runs in `f32`.

pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use crate::clip::ClipTensor;
pub use gradcheck::{check_gradients, GradcheckOptions, TensorCheck};
pub use model::{
    classify, cross_attention, cross_entropy, encode_visible, encoder_forward, finetune_gradients, mae_forward,
    mca_forward, normalize_tube, patch_embed, pretrain_gradients, reconstruction_loss, split_embeddings, MaeOutput,
};
pub use params::{init_params, read_checkpoint, write_checkpoint, TinyNetParams};
pub use tensor::{Matrix, Scalar};
pub use train::{
    finetune_accuracy, train_finetune, train_pretrain, write_trace_csv, FinetuneSample, TrainConfig, TrainResult,
};

use serde::{Deserialize, Serialize};

use crate::clip::{ClipDims, TubeDims};
use crate::error::{invalid, Result};

/// Shape hyperparameters of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub clip_dims: ClipDims,
    pub channels: usize,
    pub tube_dims: TubeDims,
    pub d_model: usize,
    pub depth_enc: usize,
    pub depth_dec: usize,
    /// Heads of the encoder and decoder self-attention.
    pub heads: usize,
    pub mlp_ratio: usize,
    pub mca_heads: usize,
    pub mca_depth: usize,
    pub classes: usize,
}

impl NetConfig {
    /// The small configuration used by tests and the CLI defaults.
    pub fn micro(classes: usize) -> Self {
        Self {
            clip_dims: ClipDims::new(8, 32, 32),
            channels: 1,
            tube_dims: TubeDims::new(4, 8, 8),
            d_model: 32,
            depth_enc: 2,
            depth_dec: 1,
            heads: 2,
            mlp_ratio: 4,
            mca_heads: 3,
            mca_depth: 1,
            classes,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.tube_dims.volume() * self.channels
    }

    pub fn tokens(&self) -> Result<usize> {
        let (t, h, w) = self.tube_dims.cells(self.clip_dims)?;
        Ok(t * h * w)
    }

    pub fn validate(&self) -> Result<()> {
        self.tokens()?;
        if self.channels == 0 || self.d_model == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(invalid("network sizes must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(invalid(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.mca_heads == 0 || self.mca_depth == 0 {
            return Err(invalid("cross-attention needs at least one head and one layer"));
        }
        if self.classes == 0 {
            return Err(invalid("at least one class is required"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Inner,
    Outer,
    Fused,
}

/// Encoder tokens of one partition, one `d_model` row each.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<T> {
    pub tokens: Matrix<T>,
    pub partition: Partition,
}

impl<T: Scalar> EmbeddingSet<T> {
    pub fn new(tokens: Matrix<T>, partition: Partition) -> Self {
        Self { tokens, partition }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }
}
