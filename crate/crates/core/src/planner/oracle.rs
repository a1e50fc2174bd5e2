//! Exhaustive search over every (layer partition, device grouping) pair of
//! small instances, with stage times summed directly from the profile
//! tables and memory taken straight from the cost model.

use crate::model_cost::{stage_cost, ModelSpec};
use crate::profile::{Micros, ProfileSet};

use super::{evaluate_partition, Partition, PlanConfig, PlanError, StageModel, StagePlan};

pub const ORACLE_MAX_LAYERS: usize = 10;
pub const ORACLE_MAX_DEVICES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Minimise the slowest stage, independently for each stage count.
    SlowestStage,
    /// For each stage count take the canonical slowest-stage optimum (see
    /// [`Partition::canonical_key`]), drop it if 1F1B in-flight activations
    /// exceed a budget, and minimise the three-phase latency across stage
    /// counts; ties go to fewer stages.
    PhaseLatency,
}

#[derive(Debug, Clone)]
pub struct OracleOutcome {
    /// Number of (partition, grouping) pairs visited.
    pub enumerated: u64,
    /// Canonical slowest-stage optimum per stage count (index `s - 1`).
    pub per_stage: Vec<Option<(Micros, Partition)>>,
    /// Best slowest-stage value over all stage counts, fewest stages on ties.
    pub slowest_stage: Option<(Micros, Partition)>,
    /// The plan chosen under [`Objective::PhaseLatency`].
    pub phase_latency: Option<PlanConfig>,
    /// Lowest three-phase latency over every memory-feasible enumerated
    /// plan, not only the slowest-stage optima.
    pub unrestricted_phase_latency_us: Option<Micros>,
}

/// `sum_s C(L-1, s-1) C(D-1, s-1) = C(L+D-2, D-1)`.
pub fn composition_count(layers: usize, devices: usize) -> u64 {
    binomial((layers + devices - 2) as u64, (devices - 1) as u64)
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

/// All compositions of `total` into `parts` positive parts.
fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    if parts == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in 1..=total - (parts - 1) {
        for mut rest in compositions(total - first, parts - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

fn direct_stage_time(
    spec: &ModelSpec,
    profiles: &ProfileSet,
    st: &StagePlan,
    micro_batch_size: usize,
) -> Option<Micros> {
    let n = st.devices.len();
    if !micro_batch_size.is_multiple_of(n) {
        return None;
    }
    let beta = micro_batch_size / n;
    let mem = stage_cost(spec, st.layers(), beta, profiles.seq_len, false).total_bytes;
    let mut worst = 0;
    for &d in &st.devices {
        let dev = &profiles.devices[d];
        if mem > dev.memory_budget_bytes {
            return None;
        }
        let mut sum = 0;
        for l in st.layers() {
            sum += dev.fwd_us(l, beta)? + dev.bwd_us(l, beta)?;
        }
        worst = worst.max(sum);
    }
    Some(worst)
}

pub fn brute_force_oracle(
    spec: &ModelSpec,
    profiles: &ProfileSet,
    micro_batch_size: usize,
    num_micro_batches: usize,
) -> Result<OracleOutcome, PlanError> {
    let layers = spec.num_layers;
    let devices = profiles.devices.len();
    if layers > ORACLE_MAX_LAYERS || devices > ORACLE_MAX_DEVICES || devices == 0 {
        return Err(PlanError::OracleTooLarge {
            layers,
            devices,
            max_layers: ORACLE_MAX_LAYERS,
            max_devices: ORACLE_MAX_DEVICES,
        });
    }
    let model = StageModel::new(spec, profiles, micro_batch_size)?;
    let mut enumerated = 0;
    let mut per_stage: Vec<Option<(Micros, Partition)>> = vec![None; layers.min(devices)];
    let mut unrestricted: Option<Micros> = None;
    for s in 1..=layers.min(devices) {
        for layer_split in compositions(layers, s) {
            for device_split in compositions(devices, s) {
                enumerated += 1;
                let (mut l, mut d) = (0, 0);
                let stages: Vec<StagePlan> = layer_split
                    .iter()
                    .zip(&device_split)
                    .map(|(&nl, &nd)| {
                        let st = StagePlan { first_layer: l, last_layer: l + nl - 1, devices: (d..d + nd).collect() };
                        l += nl;
                        d += nd;
                        st
                    })
                    .collect();
                let part = Partition { stages };
                let Some(slowest) = part
                    .stages
                    .iter()
                    .map(|st| direct_stage_time(spec, profiles, st, micro_batch_size))
                    .try_fold(0, |acc, t| t.map(|t| acc.max(t)))
                else {
                    continue;
                };
                if let Ok(plan) = evaluate_partition(spec, profiles, &model, &part, num_micro_batches) {
                    let v = plan.objective_us();
                    unrestricted = Some(unrestricted.map_or(v, |u| u.min(v)));
                }
                let slot = &mut per_stage[s - 1];
                let better = match slot {
                    None => true,
                    Some((best, p)) => {
                        slowest < *best || (slowest == *best && part.canonical_key() < p.canonical_key())
                    }
                };
                if better {
                    *slot = Some((slowest, part));
                }
            }
        }
    }
    let slowest_stage = per_stage
        .iter()
        .flatten()
        .fold(None::<&(Micros, Partition)>, |acc, c| match acc {
            Some(a) if a.0 <= c.0 => Some(a),
            _ => Some(c),
        })
        .cloned();
    let mut phase_latency: Option<PlanConfig> = None;
    for (_, part) in per_stage.iter().flatten() {
        if let Ok(plan) = evaluate_partition(spec, profiles, &model, part, num_micro_batches) {
            if phase_latency.as_ref().is_none_or(|b| plan.objective_us() < b.objective_us()) {
                phase_latency = Some(plan);
            }
        }
    }
    Ok(OracleOutcome {
        enumerated,
        per_stage,
        slowest_stage,
        phase_latency,
        unrestricted_phase_latency_us: unrestricted,
    })
}

impl OracleOutcome {
    pub fn best(&self, objective: Objective) -> Option<Micros> {
        match objective {
            Objective::SlowestStage => self.slowest_stage.as_ref().map(|(v, _)| *v),
            Objective::PhaseLatency => self.phase_latency.as_ref().map(PlanConfig::objective_us),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{small_profiles, small_spec};
    use super::super::{dp_partition, select_plan};
    use super::*;
    use crate::par::Execution;

    #[test]
    fn counts_match_closed_form() {
        for (l, d) in [(1, 1), (4, 2), (5, 3), (8, 4)] {
            let spec = small_spec(l);
            let p = small_profiles(&spec, d, 0.0, 0);
            let out = brute_force_oracle(&spec, &p, 12, 2).unwrap();
            assert_eq!(out.enumerated, composition_count(l, d), "L={l} D={d}");
        }
        assert_eq!(composition_count(4, 2), 4);
    }

    #[test]
    fn single_layer_single_device_has_one_plan() {
        let spec = small_spec(1);
        let p = small_profiles(&spec, 1, 0.0, 0);
        let out = brute_force_oracle(&spec, &p, 4, 1).unwrap();
        assert_eq!(out.enumerated, 1);
        assert_eq!(out.phase_latency.unwrap().num_stages, 1);
    }

    #[test]
    fn rejects_large_instances() {
        let spec = small_spec(11);
        let p = small_profiles(&spec, 2, 0.0, 0);
        assert!(matches!(brute_force_oracle(&spec, &p, 4, 1), Err(PlanError::OracleTooLarge { .. })));
    }

    #[test]
    fn dp_matches_oracle_on_seed_zero() {
        let spec = small_spec(6);
        let p = small_profiles(&spec, 3, 0.5, 0);
        let model = StageModel::new(&spec, &p, 12).unwrap();
        let table = dp_partition(&model, Execution::Sequential);
        let out = brute_force_oracle(&spec, &p, 12, 4).unwrap();
        for s in 1..=3 {
            assert_eq!(table.best(s), out.per_stage[s - 1].as_ref().map(|c| c.0), "s={s}");
            assert_eq!(table.reconstruct(s), out.per_stage[s - 1].as_ref().map(|c| c.1.clone()), "s={s}");
        }
        let sel = select_plan(&spec, &p, 12, 4, Execution::Sequential).unwrap();
        assert_eq!(Some(sel.best.objective_us()), out.best(Objective::PhaseLatency));
        assert_eq!(Some(&sel.best), out.phase_latency.as_ref());
    }
}
