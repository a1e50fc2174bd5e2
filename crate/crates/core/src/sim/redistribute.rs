//! Moving cached activations and side-network parameters from their
//! pipeline owners to every data-parallel worker.
//!
//! After pipelined training, replica `r` of stage `i` holds the cached taps
//! of its own layers (plus `b_0` on the first stage) for its slice of the
//! samples, and the side-network parameters of its layers.
//!
//! - [`RedistributionMode::AllGather`]: every device ends with every cached
//!   tensor, via a ring all-gather of the per-device shards.
//! - [`RedistributionMode::ShardExchange`]: every device receives only the
//!   taps of the `1/n` sample shard it will train on; the part it computed
//!   itself stays local.
//!
//! Both modes then gather the full side-network parameters on every device.

use serde::{Deserialize, Serialize};

use crate::model_cost::ModelSpec;
use crate::planner::Partition;
use crate::profile::{comm_time, ms_to_us, LinkProfile, Micros, TensorSizes};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RedistributionMode {
    AllGather,
    ShardExchange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Redistribution {
    pub activations_us: Micros,
    pub parameters_us: Micros,
}

impl Redistribution {
    pub fn total_us(&self) -> Micros {
        self.activations_us + self.parameters_us
    }
}

/// Ring all-gather of per-device shards, step by step: in each of the
/// `n - 1` steps every device forwards one shard to its successor and the
/// step lasts as long as the largest transfer. Milliseconds.
pub fn ring_allgather_by_steps(shards: &[u64], link: &LinkProfile) -> f64 {
    let n = shards.len();
    let mut total = 0.0;
    for step in 0..n.saturating_sub(1) {
        let slowest = (0..n).map(|d| comm_time(shards[(d + n - step) % n], link)).fold(0.0, f64::max);
        total += slowest;
    }
    total
}

/// `(n - 1) / n * total / bandwidth + (n - 1) * latency`, for equal shards.
pub fn ring_allgather_closed_form(total_bytes: u64, n: usize, link: &LinkProfile) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let k = (n - 1) as f64;
    k / n as f64 * total_bytes as f64 / link.bandwidth_bytes_per_s * 1000.0 + k * link.latency_ms
}

/// Fraction of the cached taps owned by each stage.
fn tap_fractions(spec: &ModelSpec, partition: &Partition) -> Vec<f64> {
    let taps = (spec.num_layers + 1) as f64;
    partition
        .stages
        .iter()
        .enumerate()
        .map(|(i, st)| (st.last_layer - st.first_layer + 1 + usize::from(i == 0)) as f64 / taps)
        .collect()
}

pub fn simulate_redistribution(
    spec: &ModelSpec,
    partition: &Partition,
    cache_bytes: u64,
    link: &LinkProfile,
    mode: RedistributionMode,
) -> Redistribution {
    let n: usize = partition.stages.iter().map(|s| s.devices.len()).sum();
    if n <= 1 {
        return Redistribution { activations_us: 0, parameters_us: 0 };
    }
    let frac = &tap_fractions(spec, partition);
    let per_device: Vec<(f64, usize)> = partition
        .stages
        .iter()
        .enumerate()
        .flat_map(|(i, st)| st.devices.iter().map(move |_| (frac[i], st.devices.len())))
        .collect();
    let activations_ms = match mode {
        RedistributionMode::AllGather => {
            let shards: Vec<u64> =
                per_device.iter().map(|&(f, g)| (cache_bytes as f64 * f / g as f64).round() as u64).collect();
            ring_allgather_by_steps(&shards, link)
        }
        RedistributionMode::ShardExchange => per_device
            .iter()
            .map(|&(f, _)| {
                let need = (cache_bytes as f64 / n as f64 * (1.0 - f)).round() as u64;
                if need == 0 {
                    0.0
                } else {
                    comm_time(need, link)
                }
            })
            .fold(0.0, f64::max),
    };
    let sizes = TensorSizes::new(spec, 1, 1);
    let total: u64 = sizes.trainable_bytes.iter().sum();
    let parameters_ms = partition
        .stages
        .iter()
        .map(|st| {
            let need = total - sizes.stage_trainable_bytes(st.layers());
            if need == 0 {
                0.0
            } else {
                comm_time(need, link)
            }
        })
        .fold(0.0, f64::max);
    Redistribution { activations_us: ms_to_us(activations_ms), parameters_us: ms_to_us(parameters_ms) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_cost::reference_spec;
    use crate::planner::StagePlan;

    fn link() -> LinkProfile {
        LinkProfile { bandwidth_bytes_per_s: 125e6, latency_ms: 0.2 }
    }

    #[test]
    fn single_device_moves_nothing() {
        let spec = reference_spec("bart-large").unwrap();
        let part = Partition { stages: vec![StagePlan { first_layer: 0, last_layer: 23, devices: vec![0] }] };
        for mode in [RedistributionMode::AllGather, RedistributionMode::ShardExchange] {
            assert_eq!(simulate_redistribution(&spec, &part, 1 << 30, &link(), mode).total_us(), 0);
        }
    }

    #[test]
    fn equal_shards_match_closed_form() {
        for n in 1..=8 {
            let total = 40_320_000u64;
            let shards = vec![total / n as u64; n];
            let stepped = ring_allgather_by_steps(&shards, &link());
            let closed = ring_allgather_closed_form(total, n, &link());
            assert!((stepped - closed).abs() < 1e-9 * closed.max(1.0), "n={n}: {stepped} vs {closed}");
        }
    }

    #[test]
    fn pure_data_parallel_shards_are_already_local() {
        let spec = reference_spec("bart-large").unwrap();
        let part = Partition { stages: vec![StagePlan { first_layer: 0, last_layer: 23, devices: (0..4).collect() }] };
        let r = simulate_redistribution(&spec, &part, 1 << 30, &link(), RedistributionMode::ShardExchange);
        assert_eq!(r.total_us(), 0);
        let g = simulate_redistribution(&spec, &part, 1 << 30, &link(), RedistributionMode::AllGather);
        let closed = ms_to_us(ring_allgather_closed_form(1 << 30, 4, &link()));
        assert!(g.activations_us.abs_diff(closed) <= 1);
    }

    #[test]
    fn shard_exchange_moves_less_than_all_gather() {
        let spec = reference_spec("bart-large").unwrap();
        let part = Partition {
            stages: vec![
                StagePlan { first_layer: 0, last_layer: 11, devices: (0..4).collect() },
                StagePlan { first_layer: 12, last_layer: 23, devices: (4..8).collect() },
            ],
        };
        let a = simulate_redistribution(&spec, &part, 1 << 30, &link(), RedistributionMode::AllGather);
        let s = simulate_redistribution(&spec, &part, 1 << 30, &link(), RedistributionMode::ShardExchange);
        assert!(s.activations_us < a.activations_us);
        assert_eq!(s.parameters_us, a.parameters_us);
    }
}
