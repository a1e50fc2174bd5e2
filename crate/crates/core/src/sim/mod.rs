//! Deterministic discrete-event simulation of training timelines.
//!
//! The clock is integer microseconds. Each device has one compute lane, one
//! outgoing transfer lane per direction (towards the next and the previous
//! stage) and a collective lane; compute and transfers overlap freely.

mod cached;
mod export;
mod pipeline;
mod redistribute;
mod svg;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::PlanError;
use crate::profile::{Micros, ProfileError};

pub use cached::{
    estimate_run, phase_one_epoch_us, simulate_cached_epoch, CacheInfo, CachedEpochConfig, RunEstimate,
    DEFAULT_DISK_BYTES_PER_S,
};
pub use export::{export_trace, import_trace, trace_from_json, trace_to_json, TRACE_SCHEMA_VERSION};
pub use pipeline::{simulate_1f1b, simulate_partition};
pub use redistribute::{
    ring_allgather_by_steps, ring_allgather_closed_form, simulate_redistribution, Redistribution, RedistributionMode,
};
pub use svg::{render_bar_chart, render_svg};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("activation cache incomplete: {0}")]
    MissingCache(String),
    #[error("invalid trace: {0}")]
    Trace(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    FwdCell,
    BwdCell,
    SendAct,
    RecvAct,
    SendGrad,
    RecvGrad,
    AllReduce,
    Redistribute,
    CacheLoad,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        EventKind::FwdCell,
        EventKind::BwdCell,
        EventKind::SendAct,
        EventKind::RecvAct,
        EventKind::SendGrad,
        EventKind::RecvGrad,
        EventKind::AllReduce,
        EventKind::Redistribute,
        EventKind::CacheLoad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EventKind::FwdCell => "FwdCell",
            EventKind::BwdCell => "BwdCell",
            EventKind::SendAct => "SendAct",
            EventKind::RecvAct => "RecvAct",
            EventKind::SendGrad => "SendGrad",
            EventKind::RecvGrad => "RecvGrad",
            EventKind::AllReduce => "AllReduce",
            EventKind::Redistribute => "Redistribute",
            EventKind::CacheLoad => "CacheLoad",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn lane(self) -> Lane {
        match self {
            EventKind::FwdCell | EventKind::BwdCell | EventKind::CacheLoad => Lane::Compute,
            EventKind::SendAct => Lane::SendNext,
            EventKind::SendGrad => Lane::SendPrev,
            EventKind::RecvAct | EventKind::RecvGrad => Lane::Receive,
            EventKind::AllReduce | EventKind::Redistribute => Lane::Collective,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Lane {
    Compute,
    SendNext,
    SendPrev,
    Receive,
    Collective,
}

impl Lane {
    pub fn index(self) -> u32 {
        self as u32
    }

    pub fn name(self) -> &'static str {
        match self {
            Lane::Compute => "compute",
            Lane::SendNext => "send-next",
            Lane::SendPrev => "send-prev",
            Lane::Receive => "receive",
            Lane::Collective => "collective",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    /// Index into [`ScheduleTrace::device_ids`].
    pub device: usize,
    pub kind: EventKind,
    pub micro_batch: Option<usize>,
    pub stage: usize,
    /// Other end of a transfer.
    pub peer: Option<usize>,
    pub start_us: Micros,
    pub end_us: Micros,
}

impl SimEvent {
    fn sort_key(&self) -> (Micros, usize, EventKind, Option<usize>, Option<usize>, Micros) {
        (self.start_us, self.device, self.kind, self.micro_batch, self.peer, self.end_us)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseTotals {
    pub beginning_us: Micros,
    pub execution_us: Micros,
    pub ending_us: Micros,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub device_ids: Vec<String>,
    pub events: Vec<SimEvent>,
    pub makespan_us: Micros,
    pub peak_memory_bytes: Vec<u64>,
    pub phases: Option<PhaseTotals>,
}

impl ScheduleTrace {
    pub fn empty(device_ids: Vec<String>) -> Self {
        let n = device_ids.len();
        ScheduleTrace { device_ids, events: Vec::new(), makespan_us: 0, peak_memory_bytes: vec![0; n], phases: None }
    }

    fn finish(mut self) -> Self {
        self.events.sort_by_key(SimEvent::sort_key);
        self.makespan_us = self.events.iter().map(|e| e.end_us).max().unwrap_or(0);
        self
    }

    /// Compute-lane cells of one device in start order, as e.g. `F3`, `B0`,
    /// `AR`, `L`.
    pub fn cell_labels(&self, device: usize) -> Vec<String> {
        self.events
            .iter()
            .filter(|e| e.device == device)
            .filter_map(|e| {
                let mb = e.micro_batch.map(|m| m.to_string()).unwrap_or_default();
                match e.kind {
                    EventKind::FwdCell => Some(format!("F{mb}")),
                    EventKind::BwdCell => Some(format!("B{mb}")),
                    EventKind::AllReduce => Some("AR".into()),
                    EventKind::CacheLoad => Some(format!("L{mb}")),
                    _ => None,
                }
            })
            .collect()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}
