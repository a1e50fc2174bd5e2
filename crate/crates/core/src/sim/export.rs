//! Trace files in the JSON trace-event format (`chrome://tracing`,
//! Perfetto). Each simulated event becomes one complete (`"ph": "X"`) event
//! with the device as process and the lane as thread; timestamps are
//! microseconds. Everything needed to rebuild the [`ScheduleTrace`] is kept
//! in `args` and `otherData`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{EventKind, PhaseTotals, ScheduleTrace, SimError, SimEvent};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct OtherData {
    schema_version: u32,
    device_ids: Vec<String>,
    makespan_us: u64,
    peak_memory_bytes: Vec<u64>,
    phases: Option<PhaseTotals>,
}

pub fn trace_to_json(trace: &ScheduleTrace) -> String {
    let mut events: Vec<Value> = Vec::with_capacity(trace.events.len() + trace.device_ids.len());
    for (pid, id) in trace.device_ids.iter().enumerate() {
        events.push(json!({"name": "process_name", "ph": "M", "pid": pid, "tid": 0, "args": {"name": id}}));
    }
    for e in &trace.events {
        let name = match (e.kind, e.micro_batch) {
            (EventKind::FwdCell, Some(m)) => format!("F{m}"),
            (EventKind::BwdCell, Some(m)) => format!("B{m}"),
            (EventKind::AllReduce, _) => "AR".to_string(),
            (k, Some(m)) => format!("{} {m}", k.name()),
            (k, None) => k.name().to_string(),
        };
        events.push(json!({
            "name": name,
            "cat": e.kind.name(),
            "ph": "X",
            "ts": e.start_us,
            "dur": e.end_us - e.start_us,
            "pid": e.device,
            "tid": e.kind.lane().index(),
            "args": {
                "kind": e.kind.name(),
                "stage": e.stage,
                "micro_batch": e.micro_batch,
                "peer": e.peer,
            },
        }));
    }
    let other = OtherData {
        schema_version: TRACE_SCHEMA_VERSION,
        device_ids: trace.device_ids.clone(),
        makespan_us: trace.makespan_us,
        peak_memory_bytes: trace.peak_memory_bytes.clone(),
        phases: trace.phases,
    };
    let doc = json!({
        "traceEvents": events,
        "displayTimeUnit": "ms",
        "otherData": serde_json::to_value(other).expect("trace metadata serializes"),
    });
    serde_json::to_string_pretty(&doc).expect("trace serializes")
}

pub fn trace_from_json(text: &str) -> Result<ScheduleTrace, SimError> {
    let bad = |m: &str| SimError::Trace(m.to_string());
    let doc: Value = serde_json::from_str(text).map_err(|e| SimError::Trace(e.to_string()))?;
    let other: OtherData =
        serde_json::from_value(doc.get("otherData").cloned().ok_or_else(|| bad("missing otherData"))?)
            .map_err(|e| SimError::Trace(e.to_string()))?;
    if other.schema_version != TRACE_SCHEMA_VERSION {
        return Err(bad("unsupported trace schema version"));
    }
    let mut events = Vec::new();
    for ev in doc["traceEvents"].as_array().ok_or_else(|| bad("missing traceEvents"))? {
        if ev["ph"] != "X" {
            continue;
        }
        let args = &ev["args"];
        let kind = args["kind"].as_str().and_then(EventKind::from_name).ok_or_else(|| bad("unknown event kind"))?;
        let num = |v: &Value| v.as_u64().ok_or_else(|| bad("expected an unsigned integer"));
        let opt = |v: &Value| -> Result<Option<usize>, SimError> {
            if v.is_null() {
                Ok(None)
            } else {
                num(v).map(|x| Some(x as usize))
            }
        };
        let start = num(&ev["ts"])?;
        events.push(SimEvent {
            device: num(&ev["pid"])? as usize,
            kind,
            micro_batch: opt(&args["micro_batch"])?,
            stage: num(&args["stage"])? as usize,
            peer: opt(&args["peer"])?,
            start_us: start,
            end_us: start + num(&ev["dur"])?,
        });
    }
    Ok(ScheduleTrace {
        device_ids: other.device_ids,
        events,
        makespan_us: other.makespan_us,
        peak_memory_bytes: other.peak_memory_bytes,
        phases: other.phases,
    })
}

/// Write `trace` as a trace-event JSON file.
pub fn export_trace(trace: &ScheduleTrace, path: impl AsRef<Path>) -> Result<(), SimError> {
    std::fs::write(path, trace_to_json(trace))?;
    Ok(())
}

pub fn import_trace(path: impl AsRef<Path>) -> Result<ScheduleTrace, SimError> {
    trace_from_json(&std::fs::read_to_string(path)?)
}
