//! Exact 64-bit numerics for a side network trained next to a frozen toy
//! transformer, with FLOP and retained-memory instrumentation.
//!
//! The backbone produces taps `b_0 .. b_L`; the side network consumes them
//! and is the only thing trained. Because the backbone never changes, its
//! taps can be cached after the first epoch (see [`crate::cache_store`]).

mod backbone;
mod census;
mod gradcheck;
mod side;
mod tensor;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache_store::CacheError;
use crate::model_cost::{ModelSpec, Technique};

pub use backbone::{gelu, layer_norm, softmax_rows, Backbone, BackboneLayer, LAYER_NORM_EPS};
pub use census::{Census, Phase};
pub use gradcheck::{gradient_check, rel_error, GradCheck};
pub use side::{AdapterBlock, AdapterState, ForwardPass, Tape, DEFAULT_INIT_STD};
pub use tensor::Tensor;
pub use train::{
    cache_layout, fit, separable_dataset, stack_taps, train_epoch, EpochReport, FitConfig, FitResult, FitSetup, Sample,
    TapCache, TrainConfig,
};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported toy model: {0}")]
    Spec(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Dimensions of the toy backbone and side network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDims {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    /// `k`; the side network width is `hidden / k`.
    pub reduction: usize,
    pub classes: usize,
}

impl ToyDims {
    pub fn adapter_hidden(&self) -> usize {
        self.hidden / self.reduction
    }

    /// Encoder-only specs with `d` divisible by heads and by `k`.
    pub fn from_spec(spec: &ModelSpec) -> Result<Self, AdapterError> {
        let fail = |why: &str| Err(AdapterError::Spec(format!("{}: {why}", spec.name)));
        if spec.decoder_layers != 0 {
            return fail("decoder layers are not supported");
        }
        if spec.num_layers == 0 || spec.num_heads == 0 || !spec.hidden_size.is_multiple_of(spec.num_heads) {
            return fail("hidden size must split evenly across heads");
        }
        if spec.adapter_reduction == 0 || !spec.hidden_size.is_multiple_of(spec.adapter_reduction) {
            return fail("hidden size must be a multiple of the reduction factor");
        }
        if spec.num_classes < 2 {
            return fail("need at least two classes");
        }
        Ok(ToyDims {
            num_layers: spec.num_layers,
            hidden: spec.hidden_size,
            heads: spec.num_heads,
            ffn_mult: spec.ffn_mult,
            vocab: spec.vocab_size,
            reduction: spec.adapter_reduction,
            classes: spec.num_classes,
        })
    }

    /// The cost-model view of this toy: 8-byte scalars, attention scores
    /// counted, taps `b_0 .. b_L` cached.
    pub fn to_spec(&self, name: &str) -> ModelSpec {
        ModelSpec {
            name: name.into(),
            num_layers: self.num_layers,
            decoder_layers: 0,
            hidden_size: self.hidden,
            num_heads: self.heads,
            ffn_mult: self.ffn_mult,
            vocab_size: self.vocab,
            bytes_per_scalar: 8,
            technique: Technique::ParallelAdapters,
            adapter_reduction: self.reduction,
            lora_rank: 4,
            num_classes: self.classes,
            cache_layers: None,
            count_attention_scores: true,
        }
    }
}
