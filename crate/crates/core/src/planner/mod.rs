//! Hybrid pipeline/data-parallel planning.
//!
//! A plan splits the flattened layer list into `s` contiguous stages and the
//! ordered device list into `s` contiguous groups; group `i` replicates stage
//! `i` and splits every micro-batch of size `B` evenly, so each replica runs
//! `B / n_i` samples.
//!
//! [`dp_partition`] minimises the slowest stage for every stage count,
//! [`select_plan`] picks the stage count with the lowest modelled
//! per-mini-batch latency (beginning + execution + ending phase), and
//! [`brute_force_oracle`] enumerates every partition of small instances.

mod dp;
mod oracle;
mod phases;

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model_cost::{layer_cost, ModelSpec};
use crate::profile::{Micros, ProfileError, ProfileSet};

pub use dp::{dp_partition, DpTable};
pub use oracle::{
    brute_force_oracle, composition_count, Objective, OracleOutcome, ORACLE_MAX_DEVICES, ORACLE_MAX_LAYERS,
};
pub use phases::{phase_latencies, replica_batch, PhaseLatencies};

pub const PLAN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("model has {model} layers but profiles cover {profiles}")]
    LayerMismatch { model: usize, profiles: usize },
    #[error("micro-batch size and micro-batch count must be at least 1")]
    InvalidBatch,
    #[error("no feasible plan")]
    NoFeasiblePlan,
    #[error("instance too large for exhaustive search ({layers} layers, {devices} devices; limit {max_layers} and {max_devices})")]
    OracleTooLarge { layers: usize, devices: usize, max_layers: usize, max_devices: usize },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

/// One pipeline stage: a layer range replicated over a device group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub first_layer: usize,
    pub last_layer: usize,
    /// Indices into the profile's device list; contiguous and ascending.
    pub devices: Vec<usize>,
}

impl StagePlan {
    pub fn layers(&self) -> RangeInclusive<usize> {
        self.first_layer..=self.last_layer
    }
}

/// Stage boundaries and device groups, without any timing attached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub stages: Vec<StagePlan>,
}

impl Partition {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Check contiguity and coverage against `num_layers` layers and
    /// `num_devices` devices.
    pub fn validate(&self, num_layers: usize, num_devices: usize) -> Result<(), PlanError> {
        let bad = |m: String| Err(PlanError::InvalidPlan(m));
        if self.stages.is_empty() {
            return bad("no stages".into());
        }
        let (mut layer, mut device) = (0, 0);
        for (i, st) in self.stages.iter().enumerate() {
            if st.first_layer != layer || st.last_layer < st.first_layer {
                return bad(format!("stage {i} does not start at layer {layer}"));
            }
            if st.devices.is_empty() {
                return bad(format!("stage {i} has no devices"));
            }
            for &d in &st.devices {
                if d != device {
                    return bad(format!("stage {i} devices are not the next contiguous block"));
                }
                device += 1;
            }
            layer = st.last_layer + 1;
        }
        if layer != num_layers {
            return bad(format!("stages cover {layer} of {num_layers} layers"));
        }
        if device != num_devices {
            return bad(format!("groups use {device} of {num_devices} devices"));
        }
        Ok(())
    }

    /// Ordering key used to pick one plan among equally good ones: stages
    /// from last to first, each as (first layer, group size), compared
    /// lexicographically.
    pub fn canonical_key(&self) -> Vec<(usize, usize)> {
        self.stages.iter().rev().map(|s| (s.first_layer, s.devices.len())).collect()
    }
}

/// A complete plan with its modelled timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub num_stages: usize,
    pub partition: Partition,
    /// Micro-batch size `B`, split evenly across each group.
    pub micro_batch_size: usize,
    pub num_micro_batches: usize,
    /// Slowest stage time per micro-batch (the DP objective).
    pub bottleneck_us: Micros,
    pub phases: PhaseLatencies,
    /// Predicted per-mini-batch latency, beginning + execution + ending.
    pub objective_ms: f64,
    /// Predicted peak memory of each device, indexed like the profile list,
    /// with 1F1B in-flight activations counted.
    pub peak_memory_bytes: Vec<u64>,
}

impl PlanConfig {
    pub fn objective_us(&self) -> Micros {
        self.phases.total_us()
    }
}

/// Per-stage-count outcome kept for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub num_stages: usize,
    pub bottleneck_us: Option<Micros>,
    pub objective_us: Option<Micros>,
    pub partition: Option<Partition>,
    /// Why the candidate was rejected, if it was.
    pub rejected: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub best: PlanConfig,
    pub candidates: Vec<Candidate>,
}

/// Per-(layer range, device group) stage time and memory, built from
/// prefix sums over the profile tables.
#[derive(Debug, Clone)]
pub struct StageModel {
    num_layers: usize,
    num_devices: usize,
    micro_batch_size: usize,
    budgets: Vec<u64>,
    /// Indexed by group size `n` (1..=D); `None` when `B % n != 0`.
    per_size: Vec<Option<SizeTables>>,
}

#[derive(Debug, Clone)]
struct SizeTables {
    /// `time[d][l]` = sum over layers `< l` of `t_f + t_b` on device `d`.
    time: Vec<Vec<Micros>>,
    /// Prefix sums of weights + gradients + optimizer bytes.
    static_bytes: Vec<u64>,
    /// Prefix sums of activation bytes for one micro-batch.
    act_bytes: Vec<u64>,
}

impl StageModel {
    pub fn new(spec: &ModelSpec, profiles: &ProfileSet, micro_batch_size: usize) -> Result<Self, PlanError> {
        if micro_batch_size == 0 {
            return Err(PlanError::InvalidBatch);
        }
        let num_layers = spec.num_layers;
        if profiles.num_layers() != num_layers {
            return Err(PlanError::LayerMismatch { model: num_layers, profiles: profiles.num_layers() });
        }
        let num_devices = profiles.devices.len();
        let betas: Vec<usize> =
            (1..=num_devices).filter(|n| micro_batch_size.is_multiple_of(*n)).map(|n| micro_batch_size / n).collect();
        profiles.check_coverage(num_layers, &betas)?;
        let mut per_size = vec![None];
        for n in 1..=num_devices {
            if !micro_batch_size.is_multiple_of(n) {
                per_size.push(None);
                continue;
            }
            let beta = micro_batch_size / n;
            let time = profiles
                .devices
                .iter()
                .map(|d| {
                    let mut acc = vec![0];
                    for l in 0..num_layers {
                        let t = d.fwd_us(l, beta).unwrap() + d.bwd_us(l, beta).unwrap();
                        acc.push(acc[l] + t);
                    }
                    acc
                })
                .collect();
            let mut static_bytes = vec![0];
            let mut act_bytes = vec![0];
            for l in 0..num_layers {
                let c = layer_cost(spec, l, beta, profiles.seq_len, false);
                static_bytes.push(static_bytes[l] + c.static_bytes());
                act_bytes.push(act_bytes[l] + c.activations_bytes);
            }
            per_size.push(Some(SizeTables { time, static_bytes, act_bytes }));
        }
        Ok(StageModel {
            num_layers,
            num_devices,
            micro_batch_size,
            budgets: profiles.devices.iter().map(|d| d.memory_budget_bytes).collect(),
            per_size,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_devices(&self) -> usize {
        self.num_devices
    }

    pub fn micro_batch_size(&self) -> usize {
        self.micro_batch_size
    }

    /// Peak bytes on one replica of layers `x..=y` in a group of `n`
    /// devices, holding `in_flight` micro-batches of activations.
    pub fn stage_memory(&self, x: usize, y: usize, n: usize, in_flight: usize) -> Option<u64> {
        let t = self.per_size.get(n)?.as_ref()?;
        let stat = t.static_bytes[y + 1] - t.static_bytes[x];
        let act = t.act_bytes[y + 1] - t.act_bytes[x];
        Some(stat + in_flight as u64 * act)
    }

    /// Stage time for layers `x..=y` on devices `first..first + n`: the
    /// slowest replica's summed forward and backward time at `B / n`, or
    /// `None` if `B` is not divisible by `n` or any replica runs out of
    /// memory with one micro-batch of activations.
    pub fn stage_time(&self, x: usize, y: usize, first: usize, n: usize) -> Option<Micros> {
        let t = self.per_size.get(n)?.as_ref()?;
        let mem = self.stage_memory(x, y, n, 1)?;
        let mut worst = 0;
        for d in first..first + n {
            if mem > self.budgets[d] {
                return None;
            }
            worst = worst.max(t.time[d][y + 1] - t.time[d][x]);
        }
        Some(worst)
    }

    /// Per-device peak memory with 1F1B in-flight depth `min(s - i, M)` at
    /// stage `i`. Returns the first device over budget as `Err`.
    pub fn pipeline_memory(&self, partition: &Partition, num_micro_batches: usize) -> Result<Vec<u64>, usize> {
        let s = partition.num_stages();
        let mut peak = vec![0; self.num_devices];
        let mut over = None;
        for (i, st) in partition.stages.iter().enumerate() {
            let depth = (s - i).min(num_micro_batches);
            let mem = self.stage_memory(st.first_layer, st.last_layer, st.devices.len(), depth).unwrap_or(u64::MAX);
            for &d in &st.devices {
                peak[d] = mem;
                if mem > self.budgets[d] && over.is_none() {
                    over = Some(d);
                }
            }
        }
        match over {
            Some(d) => Err(d),
            None => Ok(peak),
        }
    }
}

/// Attach phase latencies and memory to a partition.
pub fn evaluate_partition(
    spec: &ModelSpec,
    profiles: &ProfileSet,
    model: &StageModel,
    partition: &Partition,
    num_micro_batches: usize,
) -> Result<PlanConfig, PlanError> {
    partition.validate(spec.num_layers, profiles.devices.len())?;
    let bottleneck_us = partition
        .stages
        .iter()
        .map(|st| model.stage_time(st.first_layer, st.last_layer, st.devices[0], st.devices.len()))
        .try_fold(0, |acc, t| t.map(|t| acc.max(t)))
        .ok_or(PlanError::NoFeasiblePlan)?;
    let peak_memory_bytes = model.pipeline_memory(partition, num_micro_batches).map_err(|d| {
        PlanError::InvalidPlan(format!("device `{}` exceeds its memory budget", profiles.devices[d].device_id))
    })?;
    let phases = phase_latencies(spec, profiles, partition, model.micro_batch_size(), num_micro_batches)?;
    Ok(PlanConfig {
        num_stages: partition.num_stages(),
        partition: partition.clone(),
        micro_batch_size: model.micro_batch_size(),
        num_micro_batches,
        bottleneck_us,
        objective_ms: phases.total_us() as f64 / 1000.0,
        phases,
        peak_memory_bytes,
    })
}

/// Run the DP, then choose the stage count minimising the modelled
/// per-mini-batch latency. Ties go to fewer stages.
pub fn select_plan(
    spec: &ModelSpec,
    profiles: &ProfileSet,
    micro_batch_size: usize,
    num_micro_batches: usize,
    exec: crate::par::Execution,
) -> Result<Selection, PlanError> {
    if num_micro_batches == 0 {
        return Err(PlanError::InvalidBatch);
    }
    let model = StageModel::new(spec, profiles, micro_batch_size)?;
    let table = dp_partition(&model, exec);
    let mut candidates = Vec::new();
    let mut best: Option<PlanConfig> = None;
    for s in 1..=table.max_stages() {
        let bottleneck = table.best(s);
        let mut cand =
            Candidate { num_stages: s, bottleneck_us: bottleneck, objective_us: None, partition: None, rejected: None };
        match table.reconstruct(s) {
            None => cand.rejected = Some("every assignment exceeds a memory budget".into()),
            Some(partition) => {
                match evaluate_partition(spec, profiles, &model, &partition, num_micro_batches) {
                    Ok(plan) => {
                        cand.objective_us = Some(plan.objective_us());
                        if best.as_ref().is_none_or(|b| plan.objective_us() < b.objective_us()) {
                            best = Some(plan);
                        }
                    }
                    Err(e) => cand.rejected = Some(e.to_string()),
                }
                cand.partition = Some(partition);
            }
        }
        candidates.push(cand);
    }
    let best = best.ok_or(PlanError::NoFeasiblePlan)?;
    Ok(Selection { best, candidates })
}

/// Versioned on-disk plan: the chosen configuration plus everything needed
/// to simulate it without re-planning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub schema_version: u32,
    pub model: ModelSpec,
    pub seq_len: usize,
    pub device_ids: Vec<String>,
    pub plan: PlanConfig,
    pub candidates: Vec<Candidate>,
}

impl PlanDocument {
    pub fn new(spec: &ModelSpec, profiles: &ProfileSet, selection: &Selection) -> Self {
        PlanDocument {
            schema_version: PLAN_SCHEMA_VERSION,
            model: spec.clone(),
            seq_len: profiles.seq_len,
            device_ids: profiles.devices.iter().map(|d| d.device_id.clone()).collect(),
            plan: selection.best.clone(),
            candidates: selection.candidates.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        let doc: PlanDocument =
            serde_json::from_str(text).map_err(|e| PlanError::InvalidPlan(format!("cannot parse plan: {e}")))?;
        if doc.schema_version != PLAN_SCHEMA_VERSION {
            return Err(PlanError::InvalidPlan(format!("unsupported plan schema version {}", doc.schema_version)));
        }
        doc.model.validate().map_err(|e| PlanError::InvalidPlan(e.to_string()))?;
        doc.plan.partition.validate(doc.model.num_layers, doc.device_ids.len())?;
        Ok(doc)
    }

    /// Reject a profile set whose device list differs from the planned one.
    pub fn check_profiles(&self, profiles: &ProfileSet) -> Result<(), PlanError> {
        let ids: Vec<&str> = profiles.devices.iter().map(|d| d.device_id.as_str()).collect();
        if ids != self.device_ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(PlanError::InvalidPlan("profile device list does not match the plan".into()));
        }
        if profiles.seq_len != self.seq_len {
            return Err(PlanError::InvalidPlan(format!(
                "plan was made for seq_len {} but profiles use {}",
                self.seq_len, profiles.seq_len
            )));
        }
        Ok(())
    }
}
