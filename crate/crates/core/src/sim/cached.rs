//! Data-parallel epoch over cached backbone activations.
//!
//! Each mini-batch is split as evenly as possible across all devices (the
//! first devices take the remainder). A device loads its samples' cached
//! activations from local storage, runs the side network forward and
//! backward, then all devices ring-all-reduce the side-network gradients
//! before the next mini-batch starts.

use serde::{Deserialize, Serialize};

use crate::model_cost::{layer_flops, param_count, ModelSpec};
use crate::planner::PlanConfig;
use crate::profile::{ring_allreduce_us, round_half_up, Micros, ProfileSet};

use super::{
    simulate_1f1b, simulate_redistribution, EventKind, Redistribution, RedistributionMode, ScheduleTrace, SimError,
    SimEvent,
};

/// 100 MB/s, an embedded-flash read rate.
pub const DEFAULT_DISK_BYTES_PER_S: f64 = 100e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedEpochConfig {
    pub num_samples: usize,
    /// Samples per mini-batch across the whole cluster.
    pub mini_batch_samples: usize,
    pub disk_bytes_per_s: f64,
}

/// What the activation cache holds, as reported by the cache store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheInfo {
    pub sample_count: usize,
    /// Record bytes read per sample.
    pub bytes_per_sample: u64,
}

/// Per-device, per-sample side-network forward and backward time from the
/// `micro_batch = 1` tables, with forward scaled by the side-network share
/// of each layer's forward FLOPs.
fn per_sample_times(spec: &ModelSpec, profiles: &ProfileSet, device: usize) -> Result<(f64, f64), SimError> {
    let dev = &profiles.devices[device];
    let (mut f, mut b) = (0.0, 0.0);
    for l in 0..spec.num_layers {
        let full = layer_flops(spec, l, 1, profiles.seq_len, false).fwd as f64;
        let side = layer_flops(spec, l, 1, profiles.seq_len, true).fwd as f64;
        let missing = || crate::profile::ProfileError::MissingMicroBatch {
            device: dev.device_id.clone(),
            layer: l,
            micro_batch: 1,
        };
        f += dev.fwd_us(l, 1).ok_or_else(missing)? as f64 * side / full;
        b += dev.bwd_us(l, 1).ok_or_else(missing)? as f64;
    }
    Ok((f, b))
}

pub fn simulate_cached_epoch(
    spec: &ModelSpec,
    profiles: &ProfileSet,
    cache: &CacheInfo,
    cfg: &CachedEpochConfig,
) -> Result<ScheduleTrace, SimError> {
    if cache.sample_count < cfg.num_samples {
        return Err(SimError::MissingCache(format!(
            "cache holds {} of {} samples",
            cache.sample_count, cfg.num_samples
        )));
    }
    if cfg.mini_batch_samples == 0 || !(cfg.disk_bytes_per_s.is_finite() && cfg.disk_bytes_per_s > 0.0) {
        return Err(SimError::Trace("mini-batch size and disk rate must be positive".into()));
    }
    let n = profiles.devices.len();
    let times = (0..n).map(|d| per_sample_times(spec, profiles, d)).collect::<Result<Vec<_>, _>>()?;
    let grad_bytes = param_count(spec).trainable * spec.bytes_per_scalar;
    let ar = ring_allreduce_us(grad_bytes, n, &profiles.link);
    let mut trace = ScheduleTrace::empty(profiles.devices.iter().map(|d| d.device_id.clone()).collect());
    let mut t0: Micros = 0;
    let mut remaining = cfg.num_samples;
    let mut batch = 0;
    while remaining > 0 {
        let take = remaining.min(cfg.mini_batch_samples);
        remaining -= take;
        let mut end = t0;
        for (d, &(f, b)) in times.iter().enumerate() {
            let k = take / n + usize::from(d < take % n);
            if k == 0 {
                continue;
            }
            let load = round_half_up(k as f64 * cache.bytes_per_sample as f64 / cfg.disk_bytes_per_s * 1e6);
            let fwd = round_half_up(k as f64 * f);
            let bwd = round_half_up(k as f64 * b);
            let mut t = t0;
            for (kind, dur) in [(EventKind::CacheLoad, load), (EventKind::FwdCell, fwd), (EventKind::BwdCell, bwd)] {
                trace.events.push(SimEvent {
                    device: d,
                    kind,
                    micro_batch: Some(batch),
                    stage: 0,
                    peer: None,
                    start_us: t,
                    end_us: t + dur,
                });
                t += dur;
            }
            end = end.max(t);
        }
        if n > 1 {
            for d in 0..n {
                trace.events.push(SimEvent {
                    device: d,
                    kind: EventKind::AllReduce,
                    micro_batch: Some(batch),
                    stage: 0,
                    peer: None,
                    start_us: end,
                    end_us: end + ar,
                });
            }
            end += ar;
        }
        t0 = end;
        batch += 1;
    }
    Ok(trace.finish())
}

/// Epoch time of pipelined training: one simulated mini-batch makespan per
/// mini-batch of `samples_per_mini_batch`, rounding the sample count up.
pub fn phase_one_epoch_us(mini_batch_makespan_us: Micros, num_samples: usize, samples_per_mini_batch: usize) -> Micros {
    num_samples.div_ceil(samples_per_mini_batch) as Micros * mini_batch_makespan_us
}

/// Whole fine-tuning run: one pipelined epoch that fills the cache, the
/// redistribution step, then cached data-parallel epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEstimate {
    pub epochs: usize,
    pub phase_one_epoch_us: Micros,
    pub redistribution: Redistribution,
    pub cached_epoch_us: Micros,
    pub total_us: Micros,
    /// Redistribution time over total time.
    pub redistribution_share: f64,
    /// `1 - cached / phase-one` epoch latency.
    pub cached_reduction: f64,
}

pub fn estimate_run(
    spec: &ModelSpec,
    profiles: &ProfileSet,
    plan: &PlanConfig,
    cache: &CacheInfo,
    cfg: &CachedEpochConfig,
    epochs: usize,
    mode: RedistributionMode,
) -> Result<RunEstimate, SimError> {
    if epochs == 0 {
        return Err(SimError::Trace("need at least one epoch".into()));
    }
    let mini_batch = simulate_1f1b(spec, profiles, plan)?;
    let per_mini_batch = plan.micro_batch_size * plan.num_micro_batches;
    let phase_one_epoch_us = phase_one_epoch_us(mini_batch.makespan_us, cfg.num_samples, per_mini_batch);
    let cache_bytes = cfg.num_samples as u64 * cache.bytes_per_sample;
    let redistribution = simulate_redistribution(spec, &plan.partition, cache_bytes, &profiles.link, mode);
    let cached_epoch_us = simulate_cached_epoch(spec, profiles, cache, cfg)?.makespan_us;
    let total_us = phase_one_epoch_us + redistribution.total_us() + (epochs as Micros - 1) * cached_epoch_us;
    Ok(RunEstimate {
        epochs,
        phase_one_epoch_us,
        redistribution,
        cached_epoch_us,
        total_us,
        redistribution_share: redistribution.total_us() as f64 / total_us as f64,
        cached_reduction: 1.0 - cached_epoch_us as f64 / phase_one_epoch_us as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_cost::Technique;
    use crate::profile::{DeviceProfile, LayerTiming, LinkProfile};

    fn toy_spec() -> ModelSpec {
        ModelSpec {
            name: "toy".into(),
            num_layers: 2,
            decoder_layers: 0,
            hidden_size: 16,
            num_heads: 2,
            ffn_mult: 4,
            vocab_size: 32,
            bytes_per_scalar: 8,
            technique: Technique::ParallelAdapters,
            adapter_reduction: 4,
            lora_rank: 4,
            num_classes: 2,
            cache_layers: None,
            count_attention_scores: false,
        }
    }

    fn toy_profiles(devices: usize) -> ProfileSet {
        let layer = |f: u64, b: u64| LayerTiming {
            fwd_us: [(1, f)].into_iter().collect(),
            bwd_us: [(1, b)].into_iter().collect(),
        };
        ProfileSet {
            seq_len: 4,
            link: LinkProfile { bandwidth_bytes_per_s: 1e6, latency_ms: 0.5 },
            devices: (0..devices)
                .map(|i| DeviceProfile {
                    device_id: format!("toy-{i}"),
                    memory_budget_bytes: 1 << 30,
                    compute_scale: 1.0,
                    layers: vec![layer(1000, 200), layer(1000, 300)],
                })
                .collect(),
        }
    }

    #[test]
    fn single_device_has_no_allreduce() {
        let spec = toy_spec();
        let cache = CacheInfo { sample_count: 8, bytes_per_sample: 1000 };
        let cfg = CachedEpochConfig { num_samples: 8, mini_batch_samples: 4, disk_bytes_per_s: 1e6 };
        let t = simulate_cached_epoch(&spec, &toy_profiles(1), &cache, &cfg).unwrap();
        assert_eq!(t.count(EventKind::AllReduce), 0);
        assert_eq!(t.count(EventKind::CacheLoad), 2);
    }

    #[test]
    fn rejects_incomplete_cache() {
        let spec = toy_spec();
        let cache = CacheInfo { sample_count: 3, bytes_per_sample: 1000 };
        let cfg = CachedEpochConfig { num_samples: 4, mini_batch_samples: 4, disk_bytes_per_s: 1e6 };
        let err = simulate_cached_epoch(&spec, &toy_profiles(2), &cache, &cfg).unwrap_err();
        assert!(err.to_string().contains("3 of 4"), "{err}");
    }

    #[test]
    fn two_devices_four_samples_hand_built() {
        let spec = toy_spec();
        // Side-network share of the forward FLOPs, hand counted for T=4,
        // d=16, r=4, C=2, h=2, f=4 (attention scores off):
        // backbone per layer 2*(4*256 + 8*256)*4 = 24576
        // layer 0 side: D 2*16*4*4=512, G 4*4*4*4=256, W_down 512 -> 1280
        // layer 1 side: D 512, G 256, W_up 512, head 2*16*2 = 64 -> 1344
        let f0: f64 = 1000.0 * 1280.0 / (24576.0 + 1280.0);
        let f1: f64 = 1000.0 * 1344.0 / (24576.0 + 1344.0);
        let per_fwd = f0 + f1;
        let cache = CacheInfo { sample_count: 4, bytes_per_sample: 2500 };
        let cfg = CachedEpochConfig { num_samples: 4, mini_batch_samples: 4, disk_bytes_per_s: 1e6 };
        let t = simulate_cached_epoch(&spec, &toy_profiles(2), &cache, &cfg).unwrap();
        // two samples per device: load 2*2500 B at 1 MB/s = 5000 us
        let load = 5000;
        let fwd = (2.0 * per_fwd + 0.5).floor() as u64;
        let bwd = 2 * 500;
        // trainable bytes: W_down 64 + 2*(64+32+8) + W_up 64 + head 34 = 370 params * 8
        let ar_ms: f64 = 2.0 / 2.0 * 2960.0 / 1e6 * 1000.0 + 2.0 * 0.5;
        let ar = (ar_ms * 1000.0 + 0.5).floor() as u64;
        let mut expected = Vec::new();
        for d in 0..2 {
            expected.push((d, EventKind::CacheLoad, 0, load));
            expected.push((d, EventKind::FwdCell, load, load + fwd));
            expected.push((d, EventKind::BwdCell, load + fwd, load + fwd + bwd));
            expected.push((d, EventKind::AllReduce, load + fwd + bwd, load + fwd + bwd + ar));
        }
        expected.sort_by_key(|e| (e.2, e.0, e.1));
        let got: Vec<_> = t.events.iter().map(|e| (e.device, e.kind, e.start_us, e.end_us)).collect();
        assert_eq!(got, expected);
        assert_eq!(t.makespan_us, load + fwd + bwd + ar);
    }
}
