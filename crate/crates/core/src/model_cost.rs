//! Architecture descriptors and analytic cost models.
//!
//! Every transformer is treated as one flattened, ordered list of layers:
//! encoder layers first, then `decoder_layers` decoder layers. A decoder
//! layer carries one extra (cross) attention block.
//!
//! # Parameter counts
//!
//! Per backbone layer `l` with `a(l)` attention blocks (1 for encoder layers,
//! 2 for decoder layers) and FFN multiplier `f`:
//!
//! ```text
//! backbone(l) = a(l) * 4 d^2 + 2 f d^2          (no biases, parameter-free norms)
//! embeddings  = vocab * d                      (tied input/output, counted once)
//! ```
//!
//! Inserted modules, per layer:
//!
//! ```text
//! Adapters          2 d m + m + d               m = d / k, one bottleneck per layer
//! LoRA              a(l) * 2 * (2 d rank)       query and value of every attention block
//! ParallelAdapters  d r + 2 r^2 + 2 r           D_i (d->r), two r->r layers with biases
//!                   + d r                       W_down, first layer only
//!                   + r d + d C + C             W_up and classifier head, last layer only
//! ```
//!
//! # FLOPs
//!
//! Forward FLOPs are `2 * params * tokens` for every matmul. Embedding
//! lookups and elementwise work are not counted. When
//! `count_attention_scores` is set, each attention block adds `4 * T * S * d`
//! for `QK^T` and `PV`. Backward FLOPs of a linear map are `1x` forward for the
//! input gradient plus `1x` forward for the weight gradient, so frozen layers
//! cost `1x` forward and trainable layers fed only by backbone activations
//! (`W_down`, `D_i`) also cost `1x`.
//!
//! # Activations
//!
//! Retained scalars per token and layer, `h` heads, sequence length `S`:
//!
//! ```text
//! Full        a(l) (6 d + h S) + 2 d + 2 f d    inputs of every linear map are kept
//! frozen      a(l) (4 d + h S) + d + f d        only what nonlinearities need
//! Adapters    frozen + d + 2 m
//! LoRA        frozen + a(l) (d + 2 rank)
//! Parallel    d + 2 r per layer, + d for b_0, + r for a_L; + (d + C) per sequence
//! ```
//!
//! Optimizer state is modelled as Adam (two moments) and kept in its own
//! field; [`CostBreakdown::activations_with_optimizer`] gives the combined
//! figure used by tables that fold the two together.

use std::fmt;
use std::ops::RangeInclusive;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("invalid model spec `{name}`: {reason}")]
    Invalid { name: String, reason: String },
    #[error("cannot read model spec: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse model spec: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Technique {
    Full,
    Adapters,
    LoRA,
    ParallelAdapters,
}

impl Technique {
    pub const ALL: [Technique; 4] =
        [Technique::Full, Technique::Adapters, Technique::LoRA, Technique::ParallelAdapters];

    /// Whether backpropagation has to traverse the backbone.
    pub fn backprops_backbone(self) -> bool {
        !matches!(self, Technique::ParallelAdapters)
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Technique::Full => "Full",
            Technique::Adapters => "Adapters",
            Technique::LoRA => "LoRA",
            Technique::ParallelAdapters => "ParallelAdapters",
        };
        f.write_str(s)
    }
}

fn default_ffn_mult() -> usize {
    4
}
fn default_bytes_per_scalar() -> u64 {
    4
}
fn default_reduction() -> usize {
    8
}
fn default_lora_rank() -> usize {
    32
}
fn default_num_classes() -> usize {
    2
}

/// Architecture descriptor for a (flattened) transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// Total flattened layer count (encoder + decoder).
    pub num_layers: usize,
    /// Trailing layers that carry a cross-attention block.
    #[serde(default)]
    pub decoder_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    pub vocab_size: usize,
    #[serde(default = "default_bytes_per_scalar")]
    pub bytes_per_scalar: u64,
    pub technique: Technique,
    /// Reduction factor `k`; adapter hidden size is `hidden_size / k`.
    #[serde(default = "default_reduction")]
    pub adapter_reduction: usize,
    #[serde(default = "default_lora_rank")]
    pub lora_rank: usize,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    /// Tap tensors cached per token. Defaults to `num_layers + 1` (b_0..b_L).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_layers: Option<usize>,
    #[serde(default)]
    pub count_attention_scores: bool,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self, SpecError> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SpecError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ModelSpec serializes")
    }

    pub fn with_technique(&self, technique: Technique) -> Self {
        Self { technique, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let fail = |reason: String| Err(SpecError::Invalid { name: self.name.clone(), reason });
        let d = self.hidden_size;
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if d == 0 || self.num_heads == 0 {
            return fail("hidden_size and num_heads must be at least 1".into());
        }
        if !d.is_multiple_of(self.num_heads) {
            return fail(format!("hidden_size {d} not divisible by num_heads {}", self.num_heads));
        }
        if self.decoder_layers > self.num_layers {
            return fail("decoder_layers exceeds num_layers".into());
        }
        if self.ffn_mult == 0 || self.vocab_size == 0 || self.bytes_per_scalar == 0 {
            return fail("ffn_mult, vocab_size and bytes_per_scalar must be positive".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be at least 1".into());
        }
        if self.lora_rank == 0 || 2 * self.lora_rank > d {
            return fail(format!("lora_rank {} must lie in 1..={}", self.lora_rank, d / 2));
        }
        let k = self.adapter_reduction;
        if k < 2 || !d.is_multiple_of(k) {
            return fail(format!("adapter_reduction {k} must be >= 2 and divide hidden_size {d}"));
        }
        if let Some(0) = self.cache_layers {
            return fail("cache_layers must be positive".into());
        }
        Ok(())
    }

    /// Adapter hidden size `r = d / k`.
    pub fn adapter_hidden(&self) -> usize {
        self.hidden_size / self.adapter_reduction
    }

    pub fn is_decoder_layer(&self, layer: usize) -> bool {
        layer >= self.num_layers - self.decoder_layers
    }

    pub fn attention_blocks(&self, layer: usize) -> u64 {
        1 + u64::from(self.is_decoder_layer(layer))
    }

    pub fn cached_tensors(&self) -> usize {
        self.cache_layers.unwrap_or(self.num_layers + 1)
    }

    /// Stable digest of every field; used to tie artifacts to a spec.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("ModelSpec serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

const REFERENCE_SPECS: [(&str, &str); 4] = [
    ("t5-base", include_str!("../fixtures/models/t5-base.json")),
    ("bart-large", include_str!("../fixtures/models/bart-large.json")),
    ("t5-large", include_str!("../fixtures/models/t5-large.json")),
    ("bart-large-x2", include_str!("../fixtures/models/bart-large-x2.json")),
];

/// Bundled reference architectures (T5-Base, BART-Large, T5-Large, and a
/// BART-Large variant scaled to exceed a 4 GiB device).
pub fn reference_specs() -> Vec<ModelSpec> {
    REFERENCE_SPECS.iter().map(|(_, text)| ModelSpec::from_json(text).expect("bundled spec is valid")).collect()
}

pub fn reference_spec(name: &str) -> Option<ModelSpec> {
    REFERENCE_SPECS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| ModelSpec::from_json(text).expect("bundled spec is valid"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub backbone: u64,
    pub trainable: u64,
}

impl ParamCount {
    pub fn trainable_percent(&self) -> f64 {
        100.0 * self.trainable as f64 / self.backbone as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub weights_bytes: u64,
    pub gradients_bytes: u64,
    pub optimizer_bytes: u64,
    pub activations_bytes: u64,
    pub total_bytes: u64,
    pub fwd_flops: u64,
    pub bwd_flops: u64,
}

impl CostBreakdown {
    /// Activations plus optimizer state, the way a framework memory tracer
    /// would bucket them.
    pub fn activations_with_optimizer(&self) -> u64 {
        self.activations_bytes + self.optimizer_bytes
    }

    /// Everything except activations; does not depend on the batch.
    pub fn static_bytes(&self) -> u64 {
        self.weights_bytes + self.gradients_bytes + self.optimizer_bytes
    }

    fn seal(mut self) -> Self {
        self.total_bytes = self.weights_bytes + self.gradients_bytes + self.optimizer_bytes + self.activations_bytes;
        self
    }

    fn add(self, other: CostBreakdown) -> Self {
        CostBreakdown {
            weights_bytes: self.weights_bytes + other.weights_bytes,
            gradients_bytes: self.gradients_bytes + other.gradients_bytes,
            optimizer_bytes: self.optimizer_bytes + other.optimizer_bytes,
            activations_bytes: self.activations_bytes + other.activations_bytes,
            total_bytes: self.total_bytes + other.total_bytes,
            fwd_flops: self.fwd_flops + other.fwd_flops,
            bwd_flops: self.bwd_flops + other.bwd_flops,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flops {
    pub fwd: u64,
    pub bwd: u64,
}

impl Flops {
    pub fn total(&self) -> u64 {
        self.fwd + self.bwd
    }
}

/// Frozen backbone parameters of one layer (embeddings excluded).
pub fn backbone_layer_params(spec: &ModelSpec, layer: usize) -> u64 {
    let d = spec.hidden_size as u64;
    let f = spec.ffn_mult as u64;
    spec.attention_blocks(layer) * 4 * d * d + 2 * f * d * d
}

pub fn embedding_params(spec: &ModelSpec) -> u64 {
    (spec.vocab_size * spec.hidden_size) as u64
}

/// Parameters of the technique-specific modules attached to `layer`.
pub fn module_layer_params(spec: &ModelSpec, layer: usize) -> u64 {
    let d = spec.hidden_size as u64;
    match spec.technique {
        Technique::Full => 0,
        Technique::Adapters => {
            let m = spec.adapter_hidden() as u64;
            2 * d * m + m + d
        }
        Technique::LoRA => spec.attention_blocks(layer) * 2 * (2 * d * spec.lora_rank as u64),
        Technique::ParallelAdapters => {
            let r = spec.adapter_hidden() as u64;
            let c = spec.num_classes as u64;
            let mut p = d * r + 2 * r * r + 2 * r;
            if layer == 0 {
                p += d * r;
            }
            if layer + 1 == spec.num_layers {
                p += r * d + d * c + c;
            }
            p
        }
    }
}

/// Parameters updated by the optimizer that belong to `layer`.
pub fn trainable_layer_params(spec: &ModelSpec, layer: usize) -> u64 {
    match spec.technique {
        Technique::Full => backbone_layer_params(spec, layer) + if layer == 0 { embedding_params(spec) } else { 0 },
        _ => module_layer_params(spec, layer),
    }
}

pub fn param_count(spec: &ModelSpec) -> ParamCount {
    let layers = 0..spec.num_layers;
    let backbone = embedding_params(spec) + layers.clone().map(|l| backbone_layer_params(spec, l)).sum::<u64>();
    let trainable = layers.map(|l| trainable_layer_params(spec, l)).sum();
    ParamCount { backbone, trainable }
}

/// Forward FLOPs of the frozen backbone layer for `batch` sequences.
pub fn backbone_layer_fwd_flops(spec: &ModelSpec, layer: usize, batch: usize, seq_len: usize) -> u64 {
    let tokens = (batch * seq_len) as u64;
    let mut flops = 2 * backbone_layer_params(spec, layer) * tokens;
    if spec.count_attention_scores {
        flops += spec.attention_blocks(layer) * 4 * tokens * seq_len as u64 * spec.hidden_size as u64;
    }
    flops
}

fn module_layer_flops(spec: &ModelSpec, layer: usize, batch: usize, seq_len: usize) -> Flops {
    let t = (batch * seq_len) as u64;
    let d = spec.hidden_size as u64;
    match spec.technique {
        Technique::Full => Flops { fwd: 0, bwd: 0 },
        Technique::Adapters => {
            let m = spec.adapter_hidden() as u64;
            let fwd = 2 * (2 * d * m) * t;
            Flops { fwd, bwd: 2 * fwd }
        }
        Technique::LoRA => {
            let fwd = spec.attention_blocks(layer) * 2 * (4 * d * spec.lora_rank as u64) * t;
            Flops { fwd, bwd: 2 * fwd }
        }
        Technique::ParallelAdapters => {
            let r = spec.adapter_hidden() as u64;
            let c = spec.num_classes as u64;
            // D_i consumes a backbone tap: weight gradient only.
            let mut fwd = 2 * d * r * t + 4 * r * r * t;
            let mut bwd = 2 * d * r * t + 8 * r * r * t;
            if layer == 0 {
                fwd += 2 * d * r * t;
                bwd += 2 * d * r * t;
            }
            if layer + 1 == spec.num_layers {
                let head = 2 * d * c * batch as u64;
                fwd += 2 * d * r * t + head;
                bwd += 4 * d * r * t + 2 * head;
            }
            Flops { fwd, bwd }
        }
    }
}

/// FLOPs attributed to one layer. Summing over all layers gives
/// [`flops_estimate`].
pub fn layer_flops(spec: &ModelSpec, layer: usize, batch: usize, seq_len: usize, cached: bool) -> Flops {
    let backbone = backbone_layer_fwd_flops(spec, layer, batch, seq_len);
    let module = module_layer_flops(spec, layer, batch, seq_len);
    let fwd = if cached { module.fwd } else { backbone + module.fwd };
    let bwd = match spec.technique {
        Technique::Full => 2 * backbone,
        Technique::Adapters | Technique::LoRA => backbone + module.bwd,
        Technique::ParallelAdapters => module.bwd,
    };
    Flops { fwd, bwd }
}

pub fn flops_estimate(spec: &ModelSpec, batch: usize, seq_len: usize, cached: bool) -> Flops {
    (0..spec.num_layers)
        .map(|l| layer_flops(spec, l, batch, seq_len, cached))
        .fold(Flops { fwd: 0, bwd: 0 }, |a, b| Flops { fwd: a.fwd + b.fwd, bwd: a.bwd + b.bwd })
}

/// Backbone-only forward FLOPs (what a cached run skips).
pub fn backbone_fwd_flops(spec: &ModelSpec, batch: usize, seq_len: usize) -> u64 {
    (0..spec.num_layers).map(|l| backbone_layer_fwd_flops(spec, l, batch, seq_len)).sum()
}

fn layer_activation_scalars(spec: &ModelSpec, layer: usize, batch: usize, seq_len: usize) -> u64 {
    let t = (batch * seq_len) as u64;
    let d = spec.hidden_size as u64;
    let f = spec.ffn_mult as u64;
    let hs = (spec.num_heads * seq_len) as u64;
    let a = spec.attention_blocks(layer);
    let frozen = a * (4 * d + hs) + d + f * d;
    let per_token = match spec.technique {
        Technique::Full => a * (6 * d + hs) + 2 * d + 2 * f * d,
        Technique::Adapters => frozen + d + 2 * spec.adapter_hidden() as u64,
        Technique::LoRA => frozen + a * (d + 2 * spec.lora_rank as u64),
        Technique::ParallelAdapters => {
            let r = spec.adapter_hidden() as u64;
            let mut p = d + 2 * r;
            if layer == 0 {
                p += d;
            }
            if layer + 1 == spec.num_layers {
                p += r;
            }
            p
        }
    };
    let mut scalars = per_token * t;
    if spec.technique == Technique::ParallelAdapters && layer + 1 == spec.num_layers {
        scalars += batch as u64 * (d + spec.num_classes as u64);
    }
    scalars
}

/// Memory and compute attributed to one layer at the given batch.
pub fn layer_cost(spec: &ModelSpec, layer: usize, batch: usize, seq_len: usize, cached: bool) -> CostBreakdown {
    let bps = spec.bytes_per_scalar;
    let module = module_layer_params(spec, layer);
    let resident = if cached && spec.technique == Technique::ParallelAdapters {
        module
    } else {
        let emb = if layer == 0 { embedding_params(spec) } else { 0 };
        backbone_layer_params(spec, layer) + emb + module
    };
    let gradients = trainable_layer_params(spec, layer) * bps;
    let flops = layer_flops(spec, layer, batch, seq_len, cached);
    CostBreakdown {
        weights_bytes: resident * bps,
        gradients_bytes: gradients,
        optimizer_bytes: 2 * gradients,
        activations_bytes: layer_activation_scalars(spec, layer, batch, seq_len) * bps,
        total_bytes: 0,
        fwd_flops: flops.fwd,
        bwd_flops: flops.bwd,
    }
    .seal()
}

/// Cost of a contiguous layer range, e.g. one pipeline stage.
pub fn stage_cost(
    spec: &ModelSpec,
    layers: RangeInclusive<usize>,
    batch: usize,
    seq_len: usize,
    cached: bool,
) -> CostBreakdown {
    layers.map(|l| layer_cost(spec, l, batch, seq_len, cached)).fold(CostBreakdown::default(), CostBreakdown::add)
}

/// Whole-model memory footprint for one training step over `batch`
/// sequences. With `cached` (Parallel Adapters only) the backbone weights are
/// not resident.
pub fn memory_breakdown(spec: &ModelSpec, batch: usize, seq_len: usize, cached: bool) -> CostBreakdown {
    stage_cost(spec, 0..=spec.num_layers - 1, batch, seq_len, cached)
}

/// Inference footprint: resident weights only, no runtime buffers.
pub fn inference_weights_bytes(spec: &ModelSpec) -> u64 {
    param_count(spec).backbone * spec.bytes_per_scalar
}

/// Bytes needed to cache backbone taps for `num_samples` sequences.
pub fn cache_storage_bytes(spec: &ModelSpec, num_samples: usize, seq_len: usize) -> u64 {
    (num_samples * seq_len * spec.hidden_size * spec.cached_tensors()) as u64 * spec.bytes_per_scalar
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(technique: Technique) -> ModelSpec {
        ModelSpec {
            name: "toy".into(),
            num_layers: 2,
            decoder_layers: 0,
            hidden_size: 16,
            num_heads: 2,
            ffn_mult: 4,
            vocab_size: 32,
            bytes_per_scalar: 8,
            technique,
            adapter_reduction: 8,
            lora_rank: 4,
            num_classes: 2,
            cache_layers: None,
            count_attention_scores: true,
        }
    }

    #[test]
    fn parallel_adapter_params_by_hand() {
        // d=16, k=8 -> r=2, L=2, C=2
        // W_down 32; per adapter 32 + 8 + 4 = 44 (x2); W_up 32; head 32 + 2
        let p = param_count(&toy(Technique::ParallelAdapters));
        assert_eq!(p.trainable, 32 + 44 * 2 + 32 + 34);
        // per layer 4*256 + 8*256 = 3072, x2, plus 32*16 embeddings
        assert_eq!(p.backbone, 2 * 3072 + 512);
    }

    #[test]
    fn full_trains_everything() {
        for spec in reference_specs() {
            let p = param_count(&spec.with_technique(Technique::Full));
            assert_eq!(p.trainable, p.backbone);
        }
    }

    #[test]
    fn t5_large_backbone_near_737m() {
        let spec = reference_spec("t5-large").unwrap();
        let p = param_count(&spec).backbone as f64;
        assert!((p / 737e6 - 1.0).abs() < 0.05, "{p}");
    }

    #[test]
    fn full_gradients_equal_weights() {
        let spec = reference_spec("t5-large").unwrap().with_technique(Technique::Full);
        let m = memory_breakdown(&spec, 16, 128, false);
        assert_eq!(m.gradients_bytes, m.weights_bytes);
        assert_eq!(m.optimizer_bytes, 2 * m.gradients_bytes);
        let gib = m.weights_bytes as f64 / GIB;
        assert!((gib / 2.75 - 1.0).abs() < 0.02, "{gib}");
    }

    #[test]
    fn cached_parallel_adapters_hold_only_adapters() {
        let spec = reference_spec("t5-large").unwrap().with_technique(Technique::ParallelAdapters);
        let m = memory_breakdown(&spec, 4, 64, true);
        assert_eq!(m.weights_bytes, param_count(&spec).trainable * spec.bytes_per_scalar);
    }

    #[test]
    fn cached_forward_is_adapter_only() {
        let spec = toy(Technique::ParallelAdapters);
        let cached = flops_estimate(&spec, 2, 8, true);
        let full = flops_estimate(&spec, 2, 8, false);
        assert_eq!(cached.fwd + backbone_fwd_flops(&spec, 2, 8), full.fwd);
        assert_eq!(cached.bwd, full.bwd);
        // hand count: T=16, d=16, r=2, C=2, L=2
        // W_down 2*16*16*2, D 2*(2*16*16*2), G 2*(4*16*4), W_up 2*16*16*2, head 2*16*2*2
        assert_eq!(cached.fwd, 1024 + 2048 + 512 + 1024 + 128);
    }

    #[test]
    fn forward_share_for_adapters_on_t5_large() {
        let spec = reference_spec("t5-large").unwrap().with_technique(Technique::Adapters);
        let f = flops_estimate(&spec, 16, 128, false);
        let share = f.fwd as f64 / f.total() as f64;
        assert!((0.44..=0.66).contains(&share), "{share}");
    }

    #[test]
    fn t5_base_cache_under_one_gigabyte() {
        let spec = reference_spec("t5-base").unwrap();
        assert_eq!(spec.cached_tensors(), 12);
        let bytes = cache_storage_bytes(&spec, 500, 30);
        assert_eq!(bytes, 500 * 30 * 768 * 12 * 4);
        assert!((bytes as f64 / GIB - 0.515).abs() < 0.001);
        assert!(bytes < 1_000_000_000);
        assert_eq!(cache_storage_bytes(&spec, 0, 30), 0);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = toy(Technique::ParallelAdapters);
        s.num_heads = 3;
        assert!(s.validate().is_err());
        let mut s = toy(Technique::ParallelAdapters);
        s.adapter_reduction = 1;
        assert!(s.validate().is_err());
        let mut s = toy(Technique::ParallelAdapters);
        s.num_layers = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn stage_costs_sum_to_model() {
        let spec = reference_spec("bart-large").unwrap();
        let whole = memory_breakdown(&spec, 3, 32, false);
        let a = stage_cost(&spec, 0..=9, 3, 32, false);
        let b = stage_cost(&spec, 10..=spec.num_layers - 1, 3, 32, false);
        assert_eq!(whole.total_bytes, a.total_bytes + b.total_bytes);
        assert_eq!(whole.fwd_flops, a.fwd_flops + b.fwd_flops);
    }
}
