//! Per-mini-batch latency of a pipeline plan, split into three phases:
//!
//! ```text
//! beginning = sum_{i < s}  (e_f(i) + c_f(i))
//! execution = M * (e_f(s) + e_b(s))
//! ending    = max_i (AR(i) + sum_{j = i}^{s-1} (e_b(j) + c_b(j)))
//! ```
//!
//! `e_f(i)`/`e_b(i)` are the slowest replica's per-micro-batch forward and
//! backward time of stage `i`, `c_f(i)`/`c_b(i)` the transfer of the
//! boundary activation/gradient between stages `i` and `i + 1`, and `AR(i)`
//! the ring all-reduce of stage `i`'s trainable parameters over its group.
//! The sum in the ending phase stops at `s - 1`, so the last stage
//! contributes its all-reduce only.

use serde::{Deserialize, Serialize};

use crate::model_cost::ModelSpec;
use crate::profile::{comm_time_us, ring_allreduce_us, Micros, ProfileSet, TensorSizes};

use super::{Partition, PlanError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseLatencies {
    pub fwd_us: Vec<Micros>,
    pub bwd_us: Vec<Micros>,
    /// Activation transfer from stage `i` to `i + 1`; length `s - 1`.
    pub send_act_us: Vec<Micros>,
    /// Gradient transfer from stage `i + 1` to `i`; length `s - 1`.
    pub send_grad_us: Vec<Micros>,
    pub all_reduce_us: Vec<Micros>,
    pub beginning_us: Micros,
    pub execution_us: Micros,
    pub ending_us: Micros,
}

impl PhaseLatencies {
    pub fn total_us(&self) -> Micros {
        self.beginning_us + self.execution_us + self.ending_us
    }
}

/// Micro-batch slice processed by each replica of a group of `n`.
pub fn replica_batch(micro_batch_size: usize, n: usize) -> Result<usize, PlanError> {
    if n == 0 || !micro_batch_size.is_multiple_of(n) {
        return Err(PlanError::InvalidPlan(format!(
            "micro-batch size {micro_batch_size} is not divisible by group size {n}"
        )));
    }
    Ok(micro_batch_size / n)
}

pub fn phase_latencies(
    spec: &ModelSpec,
    profiles: &ProfileSet,
    partition: &Partition,
    micro_batch_size: usize,
    num_micro_batches: usize,
) -> Result<PhaseLatencies, PlanError> {
    let s = partition.num_stages();
    let mut fwd_us = Vec::with_capacity(s);
    let mut bwd_us = Vec::with_capacity(s);
    let mut betas = Vec::with_capacity(s);
    for st in &partition.stages {
        let beta = replica_batch(micro_batch_size, st.devices.len())?;
        let (mut f, mut b) = (0, 0);
        for &d in &st.devices {
            let (df, db) = profiles.devices[d].stage_times(st.layers(), beta)?;
            f = f.max(df);
            b = b.max(db);
        }
        fwd_us.push(f);
        bwd_us.push(b);
        betas.push(beta);
    }
    let sizes: Vec<TensorSizes> = betas.iter().map(|&b| TensorSizes::new(spec, b, profiles.seq_len)).collect();
    let mut send_act_us = Vec::with_capacity(s.saturating_sub(1));
    let mut send_grad_us = Vec::with_capacity(s.saturating_sub(1));
    for i in 0..s.saturating_sub(1) {
        let boundary = partition.stages[i].last_layer;
        send_act_us.push(comm_time_us(sizes[i].activation_bytes[boundary], &profiles.link));
        send_grad_us.push(comm_time_us(sizes[i + 1].gradient_bytes[boundary], &profiles.link));
    }
    let all_reduce_us: Vec<Micros> = partition
        .stages
        .iter()
        .zip(&sizes)
        .map(|(st, sz)| ring_allreduce_us(sz.stage_trainable_bytes(st.layers()), st.devices.len(), &profiles.link))
        .collect();

    let beginning_us = (0..s - 1).map(|i| fwd_us[i] + send_act_us[i]).sum();
    let execution_us = num_micro_batches as u64 * (fwd_us[s - 1] + bwd_us[s - 1]);
    let ending_us = (0..s)
        .map(|i| all_reduce_us[i] + (i..s - 1).map(|j| bwd_us[j] + send_grad_us[j]).sum::<Micros>())
        .max()
        .unwrap_or(0);
    Ok(PhaseLatencies {
        fwd_us,
        bwd_us,
        send_act_us,
        send_grad_us,
        all_reduce_us,
        beginning_us,
        execution_us,
        ending_us,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::{small_profiles, small_spec};
    use super::super::StagePlan;
    use super::*;
    use crate::profile::LinkProfile;

    fn two_stage() -> Partition {
        Partition {
            stages: vec![
                StagePlan { first_layer: 0, last_layer: 2, devices: vec![0] },
                StagePlan { first_layer: 3, last_layer: 5, devices: vec![1] },
            ],
        }
    }

    #[test]
    fn single_stage_has_no_beginning_and_ends_with_allreduce() {
        let spec = small_spec(4);
        let p = small_profiles(&spec, 2, 0.0, 0);
        let part = Partition { stages: vec![StagePlan { first_layer: 0, last_layer: 3, devices: vec![0, 1] }] };
        let ph = phase_latencies(&spec, &p, &part, 4, 3).unwrap();
        assert_eq!(ph.beginning_us, 0);
        assert_eq!(ph.ending_us, ph.all_reduce_us[0]);
        assert!(ph.all_reduce_us[0] > 0);
    }

    #[test]
    fn uniform_two_stage_expands_by_hand() {
        let mut spec = small_spec(6);
        spec.decoder_layers = 0;
        spec.technique = crate::model_cost::Technique::Adapters;
        let mut p = small_profiles(&spec, 2, 0.0, 0);
        p.link = LinkProfile { bandwidth_bytes_per_s: 1e30, latency_ms: 0.0 };
        let ph = phase_latencies(&spec, &p, &two_stage(), 4, 5).unwrap();
        let d = &p.devices[0];
        let ef: u64 = (0..3).map(|l| d.fwd_us(l, 4).unwrap()).sum();
        let eb: u64 = (0..3).map(|l| d.bwd_us(l, 4).unwrap()).sum();
        assert_eq!(ph.fwd_us, vec![ef, ef]);
        assert_eq!(ph.beginning_us, ef);
        assert_eq!(ph.execution_us, 5 * (ef + eb));
        assert_eq!(ph.ending_us, eb);
        assert_eq!(ph.total_us(), (5 + 1) * (ef + eb));
    }

    #[test]
    fn execution_phase_linear_in_micro_batches() {
        let spec = small_spec(6);
        let p = small_profiles(&spec, 2, 0.3, 4);
        let e1 = phase_latencies(&spec, &p, &two_stage(), 4, 1).unwrap();
        for m in 2..10u64 {
            let em = phase_latencies(&spec, &p, &two_stage(), 4, m as usize).unwrap();
            assert_eq!(em.execution_us, m * e1.execution_us);
            assert_eq!(em.beginning_us, e1.beginning_us);
            assert_eq!(em.ending_us, e1.ending_us);
        }
    }
}
