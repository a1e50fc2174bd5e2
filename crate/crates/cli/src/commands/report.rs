use std::path::{Path, PathBuf};

use adapterpipe::cache_store::{CacheHeader, CacheStore, IntegrityReport, HEADER_FILE, RECORDS_FILE};
use adapterpipe::model_cost::{memory_breakdown, param_count, ModelSpec, Technique, GIB};
use adapterpipe::planner::PlanDocument;
use adapterpipe::profile::us_to_ms;
use adapterpipe::sim::{import_trace, render_bar_chart, render_svg, EventKind};
use clap::Args;
use serde::Serialize;

use super::tune_toy::TuneReport;
use crate::artifacts::{Artifact, Run};
use crate::error::CliError;
use crate::inputs::load_model;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Gather plan, trace, toy-run and cache results with cost-model tables
/// into one JSON report plus SVG charts.
#[derive(Debug, Clone, Args)]
#[command(group = clap::ArgGroup::new("sources").multiple(true).required(true).args(["plan", "trace", "tune", "cache_dir", "model"]))]
pub struct ReportArgs {
    #[arg(long, value_name = "PATH")]
    pub plan: Option<PathBuf>,
    /// Trace from `simulate`; drawn as a Gantt chart.
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    /// Report from `tune-toy`.
    #[arg(long, value_name = "PATH")]
    pub tune: Option<PathBuf>,
    /// Activation cache to describe and verify.
    #[arg(long, value_name = "DIR")]
    pub cache_dir: Option<PathBuf>,
    /// Model for the cost tables; defaults to the plan's model.
    #[arg(long)]
    pub model: Option<String>,
    /// Batch for the cost tables; defaults to the plan's micro-batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Sequence length for the cost tables; defaults to the plan's.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Report JSON; charts are written next to it as `<stem>-*.svg`.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct StageRow {
    stage: usize,
    first_layer: usize,
    last_layer: usize,
    devices: Vec<String>,
}

#[derive(Serialize)]
struct CandidateRow {
    num_stages: usize,
    objective_ms: Option<f64>,
    rejected: Option<String>,
}

#[derive(Serialize)]
struct PlanSection {
    model: String,
    num_stages: usize,
    micro_batch_size: usize,
    num_micro_batches: usize,
    /// Devices per stage, e.g. `[4, 4]`.
    group_sizes: Vec<usize>,
    grouping: Vec<StageRow>,
    bottleneck_ms: f64,
    beginning_ms: f64,
    execution_ms: f64,
    ending_ms: f64,
    objective_ms: f64,
    peak_memory_bytes: Vec<u64>,
    candidates: Vec<CandidateRow>,
}

#[derive(Serialize)]
struct TraceSection {
    devices: Vec<String>,
    makespan_ms: f64,
    events: std::collections::BTreeMap<String, usize>,
    peak_memory_bytes: Vec<u64>,
}

#[derive(Serialize)]
struct TechniqueRow {
    technique: String,
    backbone_params: u64,
    trainable_params: u64,
    trainable_percent: f64,
    weights_bytes: u64,
    gradients_bytes: u64,
    optimizer_bytes: u64,
    activations_bytes: u64,
    total_bytes: u64,
    fwd_flops: u64,
    bwd_flops: u64,
}

#[derive(Serialize)]
struct CostSection {
    model: String,
    batch: usize,
    seq_len: usize,
    /// The four techniques, then Parallel Adapters over cached activations.
    rows: Vec<TechniqueRow>,
}

#[derive(Serialize)]
struct TuneSection {
    backbone_fingerprint: String,
    trainable_params: usize,
    mean_losses: Vec<f64>,
    backbone_fwd_flops: Vec<u64>,
    backbone_bwd_flops: Vec<u64>,
    adapter_flops: Vec<u64>,
    equivalence_passed: Option<bool>,
}

#[derive(Serialize)]
struct CacheSection {
    header: CacheHeader,
    header_file_bytes: u64,
    records_file_bytes: u64,
    integrity: IntegrityReport,
}

#[derive(Serialize)]
struct Report {
    schema_version: u32,
    plan: Option<PlanSection>,
    trace: Option<TraceSection>,
    cost_model: Option<CostSection>,
    tune: Option<TuneSection>,
    cache: Option<CacheSection>,
    charts: Vec<String>,
}

fn read(path: &Path, run: &mut Run) -> Result<String, CliError> {
    run.inputs.push(path.to_path_buf());
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn chart_path(out: &Path, name: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}-{name}.svg"))
}

pub fn run(args: &ReportArgs) -> Result<Run, CliError> {
    let mut run = Run::default();
    let mut charts = Vec::new();

    let plan = match &args.plan {
        Some(p) => Some(PlanDocument::from_json(&read(p, &mut run)?)?),
        None => None,
    };
    let plan_section = plan.as_ref().map(plan_section);
    if let Some(p) = &plan_section {
        run.say(format!(
            "plan: {} stages, groups {:?}, objective {:.3} ms",
            p.num_stages, p.group_sizes, p.objective_ms
        ));
    }

    let trace_section = match &args.trace {
        Some(path) => {
            run.inputs.push(path.clone());
            let trace = import_trace(path).map_err(CliError::from)?;
            let svg = chart_path(&args.out, "gantt");
            charts.push(file_name(&svg));
            run.outputs.push(Artifact::new(&svg, render_svg(&trace)));
            run.say(format!("trace: makespan {:.3} ms, {} events", us_to_ms(trace.makespan_us), trace.events.len()));
            Some(TraceSection {
                devices: trace.device_ids.clone(),
                makespan_ms: us_to_ms(trace.makespan_us),
                events: EventKind::ALL
                    .iter()
                    .map(|k| (k.name().to_string(), trace.count(*k)))
                    .filter(|(_, n)| *n > 0)
                    .collect(),
                peak_memory_bytes: trace.peak_memory_bytes.clone(),
            })
        }
        None => None,
    };

    let model = match (&args.model, &plan) {
        (Some(m), _) => Some(load_model(m, &mut run)?),
        (None, Some(p)) => Some(p.model.clone()),
        (None, None) => None,
    };
    let cost_section = match model {
        Some(spec) => {
            let batch = args.batch.or(plan.as_ref().map(|p| p.plan.micro_batch_size)).unwrap_or(8);
            let seq_len = args.seq_len.or(plan.as_ref().map(|p| p.seq_len)).unwrap_or(128);
            if batch == 0 || seq_len == 0 {
                return Err(CliError::invalid("--batch and --seq-len must be positive"));
            }
            run.param("cost_batch", batch);
            run.param("cost_seq_len", seq_len);
            let section = cost_section(&spec, batch, seq_len);
            for (name, svg) in cost_charts(&section) {
                let path = chart_path(&args.out, name);
                charts.push(file_name(&path));
                run.outputs.push(Artifact::new(&path, svg));
            }
            Some(section)
        }
        None => None,
    };

    let tune_section = match &args.tune {
        Some(p) => {
            let r: TuneReport = serde_json::from_str(&read(p, &mut run)?)
                .map_err(|e| CliError::invalid(format!("cannot parse tune report `{}`: {e}", p.display())))?;
            Some(TuneSection {
                backbone_fingerprint: r.backbone_fingerprint,
                trainable_params: r.trainable_params,
                mean_losses: r.epochs.iter().map(|e| e.mean_loss).collect(),
                backbone_fwd_flops: r.epochs.iter().map(|e| e.census.backbone_fwd_flops).collect(),
                backbone_bwd_flops: r.epochs.iter().map(|e| e.census.backbone_bwd_flops).collect(),
                adapter_flops: r
                    .epochs
                    .iter()
                    .map(|e| e.census.adapter_fwd_flops + e.census.adapter_bwd_flops)
                    .collect(),
                equivalence_passed: r.equivalence.map(|e| e.passed),
            })
        }
        None => None,
    };

    let cache_section = match &args.cache_dir {
        Some(dir) => {
            let section = cache_section(dir)?;
            run.inputs.extend([HEADER_FILE, RECORDS_FILE].iter().map(|n| dir.join(n)).filter(|p| p.is_file()));
            let h = &section.header;
            run.say(format!("cache: {}", dir.display()));
            run.say(format!(
                "  schema {}, fingerprint {}, {} taps x {} tokens x {} hidden, {}-byte scalars",
                h.schema_version,
                h.layout.fingerprint,
                h.layout.tensors_per_sample,
                h.layout.seq_len,
                h.layout.hidden,
                h.layout.scalar_bytes
            ));
            run.say(format!(
                "  {} samples, payload {} bytes, records file {} bytes",
                h.sample_count, h.payload_bytes, section.records_file_bytes
            ));
            let i = &section.integrity;
            let status = if i.failures.is_empty() { "ok" } else { "CORRUPT" };
            run.say(format!("  integrity: {status} ({} of {} records valid)", i.valid, i.records));
            Some(section)
        }
        None => None,
    };

    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        plan: plan_section,
        trace: trace_section,
        cost_model: cost_section,
        tune: tune_section,
        cache: cache_section,
        charts,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    run.outputs.insert(0, Artifact::new(&args.out, text));
    Ok(run)
}

fn plan_section(doc: &PlanDocument) -> PlanSection {
    let p = &doc.plan;
    PlanSection {
        model: doc.model.name.clone(),
        num_stages: p.num_stages,
        micro_batch_size: p.micro_batch_size,
        num_micro_batches: p.num_micro_batches,
        group_sizes: p.partition.stages.iter().map(|s| s.devices.len()).collect(),
        grouping: p
            .partition
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| StageRow {
                stage: i,
                first_layer: s.first_layer,
                last_layer: s.last_layer,
                devices: s.devices.iter().map(|&d| doc.device_ids[d].clone()).collect(),
            })
            .collect(),
        bottleneck_ms: us_to_ms(p.bottleneck_us),
        beginning_ms: us_to_ms(p.phases.beginning_us),
        execution_ms: us_to_ms(p.phases.execution_us),
        ending_ms: us_to_ms(p.phases.ending_us),
        objective_ms: p.objective_ms,
        peak_memory_bytes: p.peak_memory_bytes.clone(),
        candidates: doc
            .candidates
            .iter()
            .map(|c| CandidateRow {
                num_stages: c.num_stages,
                objective_ms: c.objective_us.map(us_to_ms),
                rejected: c.rejected.clone(),
            })
            .collect(),
    }
}

fn technique_row(label: String, spec: &ModelSpec, batch: usize, seq_len: usize, cached: bool) -> TechniqueRow {
    let params = param_count(spec);
    let m = memory_breakdown(spec, batch, seq_len, cached);
    TechniqueRow {
        technique: label,
        backbone_params: params.backbone,
        trainable_params: params.trainable,
        trainable_percent: params.trainable_percent(),
        weights_bytes: m.weights_bytes,
        gradients_bytes: m.gradients_bytes,
        optimizer_bytes: m.optimizer_bytes,
        activations_bytes: m.activations_bytes,
        total_bytes: m.total_bytes,
        fwd_flops: m.fwd_flops,
        bwd_flops: m.bwd_flops,
    }
}

fn cost_section(spec: &ModelSpec, batch: usize, seq_len: usize) -> CostSection {
    let mut rows: Vec<TechniqueRow> = Technique::ALL
        .iter()
        .map(|&t| technique_row(t.to_string(), &spec.with_technique(t), batch, seq_len, false))
        .collect();
    let pa = spec.with_technique(Technique::ParallelAdapters);
    rows.push(technique_row("ParallelAdapters+cache".into(), &pa, batch, seq_len, true));
    CostSection { model: spec.name.clone(), batch, seq_len, rows }
}

fn cost_charts(section: &CostSection) -> Vec<(&'static str, String)> {
    let labels: Vec<String> = section.rows.iter().map(|r| r.technique.clone()).collect();
    let series = |f: fn(&TechniqueRow) -> u64, scale: f64| -> Vec<f64> {
        section.rows.iter().map(|r| f(r) as f64 / scale).collect()
    };
    let flops = render_bar_chart(
        &format!("{} training FLOPs per step (batch {}, seq {})", section.model, section.batch, section.seq_len),
        "GFLOPs",
        &labels,
        &[("forward".into(), series(|r| r.fwd_flops, 1e9)), ("backward".into(), series(|r| r.bwd_flops, 1e9))],
    );
    let memory = render_bar_chart(
        &format!("{} training memory (batch {}, seq {})", section.model, section.batch, section.seq_len),
        "GiB",
        &labels,
        &[
            ("weights".into(), series(|r| r.weights_bytes, GIB)),
            ("gradients".into(), series(|r| r.gradients_bytes, GIB)),
            ("optimizer".into(), series(|r| r.optimizer_bytes, GIB)),
            ("activations".into(), series(|r| r.activations_bytes, GIB)),
        ],
    );
    vec![("flops", flops), ("memory", memory)]
}

fn cache_section(dir: &Path) -> Result<CacheSection, CliError> {
    if !dir.join(HEADER_FILE).is_file() {
        return Err(CliError::invalid(format!("no populated activation cache at `{}`", dir.display())));
    }
    let store = CacheStore::open_unchecked(dir)?;
    let size =
        |name: &str| std::fs::metadata(dir.join(name)).map(|m| m.len()).map_err(|e| CliError::io(&dir.join(name), e));
    Ok(CacheSection {
        header: store.header().clone(),
        header_file_bytes: size(HEADER_FILE)?,
        records_file_bytes: size(RECORDS_FILE).unwrap_or(0),
        integrity: store.verify()?,
    })
}
