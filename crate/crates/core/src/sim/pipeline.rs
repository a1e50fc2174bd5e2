//! 1F1B pipeline simulation of one mini-batch.
//!
//! Stage `k` of `s` runs `min(s - k - 1, M)` warm-up forwards, then
//! alternates one forward and one backward, then drains the remaining
//! backwards. Every replica of a group runs every micro-batch on its
//! `B / n` slice; a replica of the next stage waits for all upstream slices
//! overlapping its own. After its last backward each group all-reduces its
//! trainable parameters (skipped for single-device groups).

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::model_cost::ModelSpec;
use crate::planner::{Partition, PlanConfig, PlanError, StageModel};
use crate::profile::{comm_time_us, ring_allreduce_us, Micros, ProfileSet, TensorSizes};

use super::{EventKind, PhaseTotals, ScheduleTrace, SimError, SimEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Fwd(usize),
    Bwd(usize),
}

fn one_f_one_b(stage: usize, stages: usize, micro_batches: usize) -> Vec<Op> {
    let warmup = (stages - stage - 1).min(micro_batches);
    let mut ops: Vec<Op> = (0..warmup).map(Op::Fwd).collect();
    for j in 0..micro_batches - warmup {
        ops.push(Op::Fwd(warmup + j));
        ops.push(Op::Bwd(j));
    }
    ops.extend((micro_batches - warmup..micro_batches).map(Op::Bwd));
    ops
}

struct Replica {
    stage: usize,
    /// Position inside the group.
    rank: usize,
    ops: Vec<Op>,
    next: usize,
    busy: bool,
    fwd_us: Micros,
    bwd_us: Micros,
    in_flight: usize,
    peak_in_flight: usize,
    lane_next_free: Micros,
    lane_prev_free: Micros,
}

/// Heap entries are ordered by (time, device, kind, sequence number).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    OpDone { op: usize },
    Arrival { kind: EventKind, micro_batch: usize, from: usize },
}

struct Engine {
    replicas: Vec<Replica>,
    need_act: Vec<usize>,
    need_grad: Vec<usize>,
    got_act: Vec<Vec<usize>>,
    got_grad: Vec<Vec<usize>>,
    heap: BinaryHeap<Reverse<(Micros, usize, Pending, u64)>>,
    seq: u64,
    events: Vec<SimEvent>,
}

impl Engine {
    fn push(&mut self, t: Micros, device: usize, p: Pending) {
        self.heap.push(Reverse((t, device, p, self.seq)));
        self.seq += 1;
    }

    /// Start the device's next op at `now` if the lane is idle and its
    /// inputs have arrived.
    fn try_start(&mut self, d: usize, now: Micros) {
        let r = &mut self.replicas[d];
        if r.busy || r.next >= r.ops.len() {
            return;
        }
        let (ready, kind, mb, dur) = match r.ops[r.next] {
            Op::Fwd(m) => (self.got_act[d][m] >= self.need_act[d], EventKind::FwdCell, m, r.fwd_us),
            Op::Bwd(m) => (self.got_grad[d][m] >= self.need_grad[d], EventKind::BwdCell, m, r.bwd_us),
        };
        if !ready {
            return;
        }
        r.busy = true;
        if kind == EventKind::FwdCell {
            r.in_flight += 1;
            r.peak_in_flight = r.peak_in_flight.max(r.in_flight);
        }
        let (stage, op) = (r.stage, r.next);
        self.events.push(SimEvent {
            device: d,
            kind,
            micro_batch: Some(mb),
            stage,
            peer: None,
            start_us: now,
            end_us: now + dur,
        });
        self.push(now + dur, d, Pending::OpDone { op });
    }
}

/// Samples `[lo, hi)` of a micro-batch handled by replica `rank` of a group
/// with slice size `beta`.
fn slice(rank: usize, beta: usize) -> (usize, usize) {
    (rank * beta, (rank + 1) * beta)
}

fn overlap(a: (usize, usize), b: (usize, usize)) -> usize {
    a.1.min(b.1).saturating_sub(a.0.max(b.0))
}

pub fn simulate_1f1b(spec: &ModelSpec, profiles: &ProfileSet, plan: &PlanConfig) -> Result<ScheduleTrace, SimError> {
    simulate_partition(spec, profiles, &plan.partition, plan.micro_batch_size, plan.num_micro_batches)
}

pub fn simulate_partition(
    spec: &ModelSpec,
    profiles: &ProfileSet,
    partition: &Partition,
    micro_batch_size: usize,
    num_micro_batches: usize,
) -> Result<ScheduleTrace, SimError> {
    if num_micro_batches == 0 {
        return Err(PlanError::InvalidBatch.into());
    }
    let num_devices = profiles.devices.len();
    partition.validate(spec.num_layers, num_devices)?;
    let model = StageModel::new(spec, profiles, micro_batch_size)?;
    let s = partition.num_stages();
    let m_total = num_micro_batches;

    let mut betas = Vec::with_capacity(s);
    for st in &partition.stages {
        betas.push(crate::planner::replica_batch(micro_batch_size, st.devices.len())?);
    }
    let per_sample = TensorSizes::new(spec, 1, profiles.seq_len);
    let mut stage_of = vec![0; num_devices];
    let mut replicas = Vec::with_capacity(num_devices);
    for (k, st) in partition.stages.iter().enumerate() {
        for (rank, &d) in st.devices.iter().enumerate() {
            let (f, b) = profiles.devices[d].stage_times(st.layers(), betas[k])?;
            stage_of[d] = k;
            replicas.push(Replica {
                stage: k,
                rank,
                ops: one_f_one_b(k, s, m_total),
                next: 0,
                busy: false,
                fwd_us: f,
                bwd_us: b,
                in_flight: 0,
                peak_in_flight: 0,
                lane_next_free: 0,
                lane_prev_free: 0,
            });
        }
    }
    // Upstream/downstream slice counts each replica waits for.
    let needed = |from_stage: usize, to: &Replica| -> usize {
        let mine = slice(to.rank, betas[to.stage]);
        (0..partition.stages[from_stage].devices.len())
            .filter(|&r| overlap(slice(r, betas[from_stage]), mine) > 0)
            .count()
    };
    let need_act: Vec<usize> = replicas.iter().map(|r| if r.stage == 0 { 0 } else { needed(r.stage - 1, r) }).collect();
    let need_grad: Vec<usize> =
        replicas.iter().map(|r| if r.stage + 1 == s { 0 } else { needed(r.stage + 1, r) }).collect();
    let mut eng = Engine {
        replicas,
        need_act,
        need_grad,
        got_act: vec![vec![0; m_total]; num_devices],
        got_grad: vec![vec![0; m_total]; num_devices],
        heap: BinaryHeap::new(),
        seq: 0,
        events: Vec::new(),
    };
    for d in 0..num_devices {
        eng.try_start(d, 0);
    }

    let mut group_done = vec![0usize; s];
    let mut group_end = vec![0 as Micros; s];
    while let Some(Reverse((now, d, pending, _))) = eng.heap.pop() {
        match pending {
            Pending::OpDone { op } => {
                let k = eng.replicas[d].stage;
                let rank = eng.replicas[d].rank;
                eng.replicas[d].busy = false;
                eng.replicas[d].next = op + 1;
                let (target, kind, mb) = match eng.replicas[d].ops[op] {
                    Op::Fwd(m) => ((k + 1 < s).then_some(k + 1), EventKind::SendAct, m),
                    Op::Bwd(m) => {
                        eng.replicas[d].in_flight -= 1;
                        (k.checked_sub(1), EventKind::SendGrad, m)
                    }
                };
                if let Some(target) = target {
                    let mine = slice(rank, betas[k]);
                    let boundary = partition.stages[k.min(target)].last_layer;
                    let per = match kind {
                        EventKind::SendAct => per_sample.activation_bytes[boundary],
                        _ => per_sample.gradient_bytes[boundary],
                    };
                    for (r2, &peer) in partition.stages[target].devices.iter().enumerate() {
                        let ov = overlap(mine, slice(r2, betas[target]));
                        if ov == 0 {
                            continue;
                        }
                        let dur = comm_time_us(ov as u64 * per, &profiles.link);
                        let lane = match kind {
                            EventKind::SendAct => &mut eng.replicas[d].lane_next_free,
                            _ => &mut eng.replicas[d].lane_prev_free,
                        };
                        let start = now.max(*lane);
                        *lane = start + dur;
                        eng.events.push(SimEvent {
                            device: d,
                            kind,
                            micro_batch: Some(mb),
                            stage: k,
                            peer: Some(peer),
                            start_us: start,
                            end_us: start + dur,
                        });
                        let recv = if kind == EventKind::SendAct { EventKind::RecvAct } else { EventKind::RecvGrad };
                        eng.push(start + dur, peer, Pending::Arrival { kind: recv, micro_batch: mb, from: d });
                    }
                }
                if eng.replicas[d].next == eng.replicas[d].ops.len() {
                    group_done[k] += 1;
                    group_end[k] = group_end[k].max(now);
                    let group = &partition.stages[k].devices;
                    if group_done[k] == group.len() && group.len() > 1 {
                        let bytes = TensorSizes::new(spec, betas[k], profiles.seq_len)
                            .stage_trainable_bytes(partition.stages[k].layers());
                        let ar = ring_allreduce_us(bytes, group.len(), &profiles.link);
                        for &g in group {
                            eng.events.push(SimEvent {
                                device: g,
                                kind: EventKind::AllReduce,
                                micro_batch: None,
                                stage: k,
                                peer: None,
                                start_us: group_end[k],
                                end_us: group_end[k] + ar,
                            });
                        }
                    }
                }
                eng.try_start(d, now);
            }
            Pending::Arrival { kind, micro_batch, from } => {
                eng.events.push(SimEvent {
                    device: d,
                    kind,
                    micro_batch: Some(micro_batch),
                    stage: stage_of[d],
                    peer: Some(from),
                    start_us: now,
                    end_us: now,
                });
                match kind {
                    EventKind::RecvAct => eng.got_act[d][micro_batch] += 1,
                    _ => eng.got_grad[d][micro_batch] += 1,
                }
                eng.try_start(d, now);
            }
        }
    }
    let Engine { replicas, events, .. } = eng;
    if let Some(d) = replicas.iter().position(|r| r.next < r.ops.len()) {
        return Err(SimError::Trace(format!("schedule deadlocked on device {d}")));
    }

    let peak_memory_bytes = (0..num_devices)
        .map(|d| {
            let st = &partition.stages[stage_of[d]];
            model
                .stage_memory(st.first_layer, st.last_layer, st.devices.len(), replicas[d].peak_in_flight)
                .expect("group size divides the micro-batch")
        })
        .collect();
    let mut trace = ScheduleTrace {
        device_ids: profiles.devices.iter().map(|d| d.device_id.clone()).collect(),
        events,
        makespan_us: 0,
        peak_memory_bytes,
        phases: None,
    }
    .finish();
    let last: Vec<&SimEvent> = trace
        .events
        .iter()
        .filter(|e| e.stage == s - 1 && matches!(e.kind, EventKind::FwdCell | EventKind::BwdCell))
        .collect();
    let begin = last.iter().filter(|e| e.kind == EventKind::FwdCell).map(|e| e.start_us).min().unwrap_or(0);
    let exec_end = last.iter().filter(|e| e.kind == EventKind::BwdCell).map(|e| e.end_us).max().unwrap_or(0);
    trace.phases = Some(PhaseTotals {
        beginning_us: begin,
        execution_us: exec_end - begin,
        ending_us: trace.makespan_us - exec_end,
    });
    Ok(trace)
}
