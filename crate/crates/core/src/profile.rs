//! Device runtime profiles: per-layer forward/backward timing tables keyed by
//! micro-batch size, memory budgets, and the shared LAN link.
//!
//! Times are held as integer microseconds. Millisecond values read from a
//! profile file are rounded half-up on ingestion.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_cost::{layer_flops, trainable_layer_params, ModelSpec};

/// Integer microseconds; the resolution of every timing table and of the
/// simulator clock.
pub type Micros = u64;

pub const PROFILE_SCHEMA_VERSION: u32 = 1;

/// 1000 Mbit/s.
pub const GIGABIT_LAN_BYTES_PER_S: f64 = 125_000_000.0;

/// Sustained fp32 throughput assumed for a Jetson-Nano-class device.
pub const DEFAULT_DEVICE_GFLOPS: f64 = 100.0;

pub const FOUR_GIB: u64 = 4 << 30;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("no devices")]
    NoDevices,
    #[error("device `{device}` layer {layer}: non-positive {pass} time at micro-batch {micro_batch}")]
    NonPositiveTiming { device: String, layer: usize, micro_batch: usize, pass: &'static str },
    #[error("device `{device}`: missing timing table for layer {layer}")]
    MissingLayer { device: String, layer: usize },
    #[error("device `{device}` layer {layer}: no timing entry for micro-batch size {micro_batch}")]
    MissingMicroBatch { device: String, layer: usize, micro_batch: usize },
    #[error("device `{device}` profiles {found} layers but the model has {expected}")]
    LayerCount { device: String, found: usize, expected: usize },
    #[error("invalid link: {0}")]
    Link(String),
    #[error("unsupported profile schema version {0}")]
    Schema(u32),
    #[error("cannot read profile: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse profile: {0}")]
    Parse(#[from] serde_json::Error),
}

pub fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor().max(0.0) as u64
}

pub fn ms_to_us(ms: f64) -> Micros {
    round_half_up(ms * 1000.0)
}

pub fn us_to_ms(us: Micros) -> f64 {
    us as f64 / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub bandwidth_bytes_per_s: f64,
    pub latency_ms: f64,
}

impl Default for LinkProfile {
    fn default() -> Self {
        LinkProfile { bandwidth_bytes_per_s: GIGABIT_LAN_BYTES_PER_S, latency_ms: 0.1 }
    }
}

impl LinkProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        if !(self.bandwidth_bytes_per_s.is_finite() && self.bandwidth_bytes_per_s > 0.0) {
            return Err(ProfileError::Link(format!("bandwidth {} must be > 0", self.bandwidth_bytes_per_s)));
        }
        if !(self.latency_ms.is_finite() && self.latency_ms >= 0.0) {
            return Err(ProfileError::Link(format!("latency {} must be >= 0", self.latency_ms)));
        }
        Ok(())
    }
}

/// Point-to-point transfer time in milliseconds.
pub fn comm_time(bytes: u64, link: &LinkProfile) -> f64 {
    link.latency_ms + bytes as f64 / link.bandwidth_bytes_per_s * 1000.0
}

pub fn comm_time_us(bytes: u64, link: &LinkProfile) -> Micros {
    ms_to_us(comm_time(bytes, link))
}

/// Ring all-reduce of `bytes` over `n` devices: reduce-scatter plus
/// all-gather, `2(n-1)` steps of `bytes / n` each.
pub fn ring_allreduce_time(bytes: u64, n: usize, link: &LinkProfile) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let steps = 2.0 * (n - 1) as f64;
    steps / n as f64 * bytes as f64 / link.bandwidth_bytes_per_s * 1000.0 + steps * link.latency_ms
}

pub fn ring_allreduce_us(bytes: u64, n: usize, link: &LinkProfile) -> Micros {
    ms_to_us(ring_allreduce_time(bytes, n, link))
}

/// Forward and backward timing tables for one layer, keyed by micro-batch size.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerTiming {
    pub fwd_us: BTreeMap<usize, Micros>,
    pub bwd_us: BTreeMap<usize, Micros>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub device_id: String,
    pub memory_budget_bytes: u64,
    pub compute_scale: f64,
    pub layers: Vec<LayerTiming>,
}

impl DeviceProfile {
    pub fn fwd_us(&self, layer: usize, micro_batch: usize) -> Option<Micros> {
        self.layers.get(layer)?.fwd_us.get(&micro_batch).copied()
    }

    pub fn bwd_us(&self, layer: usize, micro_batch: usize) -> Option<Micros> {
        self.layers.get(layer)?.bwd_us.get(&micro_batch).copied()
    }

    fn missing(&self, layer: usize, micro_batch: usize) -> ProfileError {
        ProfileError::MissingMicroBatch { device: self.device_id.clone(), layer, micro_batch }
    }

    /// `sum_{l in layers} t_f(beta)` and `sum t_b(beta)`.
    pub fn stage_times(
        &self,
        layers: RangeInclusive<usize>,
        micro_batch: usize,
    ) -> Result<(Micros, Micros), ProfileError> {
        let mut fwd = 0;
        let mut bwd = 0;
        for l in layers {
            fwd += self.fwd_us(l, micro_batch).ok_or_else(|| self.missing(l, micro_batch))?;
            bwd += self.bwd_us(l, micro_batch).ok_or_else(|| self.missing(l, micro_batch))?;
        }
        Ok((fwd, bwd))
    }

    pub fn micro_batches(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.first().into_iter().flat_map(|t| t.fwd_us.keys().copied())
    }
}

/// The ordered device list (its order is the planner's device order) plus
/// the link between any device pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    pub seq_len: usize,
    pub link: LinkProfile,
    pub devices: Vec<DeviceProfile>,
}

// On-disk representation.

#[derive(Serialize, Deserialize)]
struct TimingRow {
    micro_batch: usize,
    fwd_ms: f64,
    bwd_ms: f64,
}

#[derive(Serialize, Deserialize)]
struct LayerRow {
    layer: usize,
    timings: Vec<TimingRow>,
}

#[derive(Serialize, Deserialize)]
struct DeviceRow {
    device_id: String,
    memory_budget_bytes: u64,
    #[serde(default = "one")]
    compute_scale: f64,
    layers: Vec<LayerRow>,
}

fn one() -> f64 {
    1.0
}

#[derive(Serialize, Deserialize)]
struct ProfileFile {
    schema_version: u32,
    seq_len: usize,
    link: LinkProfile,
    devices: Vec<DeviceRow>,
}

impl ProfileSet {
    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let file: ProfileFile = serde_json::from_str(text)?;
        if file.schema_version != PROFILE_SCHEMA_VERSION {
            return Err(ProfileError::Schema(file.schema_version));
        }
        let mut devices = Vec::with_capacity(file.devices.len());
        for row in file.devices {
            let mut layers = vec![None; row.layers.len()];
            for lr in row.layers {
                if lr.layer >= layers.len() {
                    return Err(ProfileError::MissingLayer { device: row.device_id.clone(), layer: layers.len() });
                }
                let mut t = LayerTiming::default();
                for tr in lr.timings {
                    t.fwd_us.insert(tr.micro_batch, ms_to_us(tr.fwd_ms));
                    t.bwd_us.insert(tr.micro_batch, ms_to_us(tr.bwd_ms));
                }
                layers[lr.layer] = Some(t);
            }
            let layers = layers
                .into_iter()
                .enumerate()
                .map(|(layer, t)| t.ok_or_else(|| ProfileError::MissingLayer { device: row.device_id.clone(), layer }))
                .collect::<Result<Vec<_>, _>>()?;
            devices.push(DeviceProfile {
                device_id: row.device_id,
                memory_budget_bytes: row.memory_budget_bytes,
                compute_scale: row.compute_scale,
                layers,
            });
        }
        let set = ProfileSet { seq_len: file.seq_len, link: file.link, devices };
        set.validate()?;
        Ok(set)
    }

    pub fn to_json(&self) -> String {
        let file = ProfileFile {
            schema_version: PROFILE_SCHEMA_VERSION,
            seq_len: self.seq_len,
            link: self.link,
            devices: self
                .devices
                .iter()
                .map(|d| DeviceRow {
                    device_id: d.device_id.clone(),
                    memory_budget_bytes: d.memory_budget_bytes,
                    compute_scale: d.compute_scale,
                    layers: d
                        .layers
                        .iter()
                        .enumerate()
                        .map(|(layer, t)| LayerRow {
                            layer,
                            timings: t
                                .fwd_us
                                .iter()
                                .map(|(&mb, &f)| TimingRow {
                                    micro_batch: mb,
                                    fwd_ms: us_to_ms(f),
                                    bwd_ms: us_to_ms(t.bwd_us.get(&mb).copied().unwrap_or(0)),
                                })
                                .collect(),
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("profile serializes")
    }

    pub fn num_layers(&self) -> usize {
        self.devices.first().map_or(0, |d| d.layers.len())
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.devices.is_empty() {
            return Err(ProfileError::NoDevices);
        }
        self.link.validate()?;
        let expected = self.num_layers();
        for d in &self.devices {
            if d.layers.len() != expected {
                return Err(ProfileError::LayerCount { device: d.device_id.clone(), found: d.layers.len(), expected });
            }
            for (layer, t) in d.layers.iter().enumerate() {
                if t.fwd_us.is_empty() {
                    return Err(ProfileError::MissingLayer { device: d.device_id.clone(), layer });
                }
                for (pass, table) in [("forward", &t.fwd_us), ("backward", &t.bwd_us)] {
                    for (&mb, &v) in table {
                        if v == 0 || mb == 0 {
                            return Err(ProfileError::NonPositiveTiming {
                                device: d.device_id.clone(),
                                layer,
                                micro_batch: mb,
                                pass,
                            });
                        }
                    }
                }
                if let Some(&mb) = t.fwd_us.keys().find(|mb| !t.bwd_us.contains_key(mb)) {
                    return Err(d.missing(layer, mb));
                }
            }
        }
        Ok(())
    }

    /// Check that every device has `num_layers` tables containing every
    /// micro-batch size in `micro_batches`.
    pub fn check_coverage(&self, num_layers: usize, micro_batches: &[usize]) -> Result<(), ProfileError> {
        for d in &self.devices {
            if d.layers.len() != num_layers {
                return Err(ProfileError::LayerCount {
                    device: d.device_id.clone(),
                    found: d.layers.len(),
                    expected: num_layers,
                });
            }
            for (layer, t) in d.layers.iter().enumerate() {
                for &mb in micro_batches {
                    if !t.fwd_us.contains_key(&mb) || !t.bwd_us.contains_key(&mb) {
                        return Err(d.missing(layer, mb));
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<ProfileSet, ProfileError> {
    ProfileSet::from_json(&std::fs::read_to_string(path)?)
}

/// Knobs for [`synthesize_profiles`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_devices: usize,
    pub heterogeneity: f64,
    pub seed: u64,
    pub seq_len: usize,
    /// Tables are emitted for every micro-batch size in `1..=max_micro_batch`.
    pub max_micro_batch: usize,
    pub memory_budget_bytes: u64,
    pub device_gflops: f64,
    pub link: LinkProfile,
}

impl SynthConfig {
    pub fn new(n_devices: usize, heterogeneity: f64, seed: u64) -> Self {
        SynthConfig {
            n_devices,
            heterogeneity,
            seed,
            seq_len: 128,
            max_micro_batch: 16,
            memory_budget_bytes: FOUR_GIB,
            device_gflops: DEFAULT_DEVICE_GFLOPS,
            link: LinkProfile::default(),
        }
    }
}

/// Deterministic stand-in for on-device calibration: per-layer times are the
/// model's per-layer FLOPs divided by `device_gflops * compute_scale`, with
/// `compute_scale` drawn uniformly from `[1 - h, 1 + h]`. Times scale exactly
/// linearly in the micro-batch size.
pub fn synthesize_profiles(spec: &ModelSpec, cfg: &SynthConfig) -> ProfileSet {
    assert!(cfg.n_devices >= 1, "n_devices must be >= 1");
    assert!((0.0..1.0).contains(&cfg.heterogeneity), "heterogeneity must be in [0, 1)");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let flops_per_us = cfg.device_gflops * 1e3;
    let per_layer: Vec<_> = (0..spec.num_layers).map(|l| layer_flops(spec, l, 1, cfg.seq_len, false)).collect();
    let devices = (0..cfg.n_devices)
        .map(|i| {
            let u: f64 = rng.random();
            let scale = 1.0 + cfg.heterogeneity * (2.0 * u - 1.0);
            let layers = per_layer
                .iter()
                .map(|f| {
                    let base_f = round_half_up(f.fwd as f64 / flops_per_us / scale).max(1);
                    let base_b = round_half_up(f.bwd as f64 / flops_per_us / scale).max(1);
                    let mut t = LayerTiming::default();
                    for mb in 1..=cfg.max_micro_batch {
                        t.fwd_us.insert(mb, base_f * mb as u64);
                        t.bwd_us.insert(mb, base_b * mb as u64);
                    }
                    t
                })
                .collect();
            DeviceProfile {
                device_id: format!("dev-{i}"),
                memory_budget_bytes: cfg.memory_budget_bytes,
                compute_scale: scale,
                layers,
            }
        })
        .collect();
    ProfileSet { seq_len: cfg.seq_len, link: cfg.link, devices }
}

/// Byte sizes of the tensors that cross stage boundaries and of the
/// trainable parameters, at one micro-batch size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSizes {
    /// Output activation of each layer (the tensor sent forward).
    pub activation_bytes: Vec<u64>,
    /// Gradient w.r.t. each layer's output (the tensor sent backward).
    pub gradient_bytes: Vec<u64>,
    /// Trainable parameter bytes attributed to each layer.
    pub trainable_bytes: Vec<u64>,
}

impl TensorSizes {
    pub fn new(spec: &ModelSpec, micro_batch: usize, seq_len: usize) -> Self {
        let act = (micro_batch * seq_len * spec.hidden_size) as u64 * spec.bytes_per_scalar;
        let trainable = (0..spec.num_layers).map(|l| trainable_layer_params(spec, l) * spec.bytes_per_scalar).collect();
        TensorSizes {
            activation_bytes: vec![act; spec.num_layers],
            gradient_bytes: vec![act; spec.num_layers],
            trainable_bytes: trainable,
        }
    }

    pub fn stage_trainable_bytes(&self, layers: RangeInclusive<usize>) -> u64 {
        self.trainable_bytes[layers].iter().sum()
    }
}
