use std::path::{Path, PathBuf};

use adapterpipe::cache_store::{CacheStore, HEADER_FILE, RECORDS_FILE, RECORD_HEADER_BYTES};
use adapterpipe::model_cost::{cache_storage_bytes, ModelSpec};
use adapterpipe::planner::PlanDocument;
use adapterpipe::profile::{us_to_ms, ProfileSet};
use adapterpipe::sim::{
    estimate_run, render_svg, simulate_1f1b, simulate_cached_epoch, trace_to_json, CacheInfo, CachedEpochConfig,
    RedistributionMode, DEFAULT_DISK_BYTES_PER_S,
};
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::artifacts::{Artifact, Run};
use crate::error::CliError;
use crate::inputs::ProfileSource;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Redistribution {
    /// Each device receives only the taps of the sample shard it trains on.
    ShardExchange,
    /// Every device receives every cached tap.
    AllGather,
}

impl From<Redistribution> for RedistributionMode {
    fn from(r: Redistribution) -> Self {
        match r {
            Redistribution::ShardExchange => RedistributionMode::ShardExchange,
            Redistribution::AllGather => RedistributionMode::AllGather,
        }
    }
}

/// Replay a plan on the discrete-event simulator.
#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Plan written by `plan`.
    #[arg(long, value_name = "PATH")]
    pub plan: PathBuf,
    #[command(flatten)]
    pub source: ProfileSource,
    /// Trace-event JSON output.
    #[arg(long, value_name = "PATH")]
    pub trace: PathBuf,
    /// Gantt chart output.
    #[arg(long, value_name = "PATH")]
    pub svg: Option<PathBuf>,
    /// Simulate a data-parallel epoch over cached activations instead of
    /// one pipelined mini-batch.
    #[arg(long, requires = "samples")]
    pub cached: bool,
    /// Samples per epoch (with --cached).
    #[arg(long)]
    pub samples: Option<usize>,
    /// Populated activation cache whose record size sets the reload cost.
    #[arg(long, value_name = "DIR", conflicts_with = "modeled_cache")]
    pub cache_dir: Option<PathBuf>,
    /// Size records from the model's analytic cache formula instead of a
    /// cache on disk.
    #[arg(long)]
    pub modeled_cache: bool,
    /// Local storage read rate in MB/s.
    #[arg(long, default_value_t = DEFAULT_DISK_BYTES_PER_S / 1e6)]
    pub disk_mbps: f64,
    /// Epochs in the whole-run estimate (with --cached).
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    /// How cached activations reach the data-parallel workers.
    #[arg(long, value_enum, default_value_t = Redistribution::ShardExchange)]
    pub redistribution: Redistribution,
    /// Whole-run estimate JSON (with --cached).
    #[arg(long, value_name = "PATH")]
    pub summary: Option<PathBuf>,
}

pub fn run(args: &SimulateArgs) -> Result<Run, CliError> {
    let mut run = Run::default();
    run.inputs.push(args.plan.clone());
    let text = std::fs::read_to_string(&args.plan).map_err(|e| CliError::io(&args.plan, e))?;
    let doc = PlanDocument::from_json(&text)?;
    let profiles = args.source.load(&doc.model, &mut run)?;
    doc.check_profiles(&profiles)?;
    run.param("cached", args.cached);
    let trace = if args.cached {
        cached(args, &doc, &profiles, &mut run)?
    } else {
        if args.summary.is_some() || args.cache_dir.is_some() || args.modeled_cache {
            return Err(CliError::invalid("--summary, --cache-dir and --modeled-cache need --cached"));
        }
        let trace = simulate_1f1b(&doc.model, &profiles, &doc.plan)?;
        let phases = doc.plan.phases.total_us();
        run.say(format!(
            "1F1B mini-batch: makespan {:.3} ms (phase model {:.3} ms), {} events",
            us_to_ms(trace.makespan_us),
            us_to_ms(phases),
            trace.events.len()
        ));
        trace
    };
    // The trace leads so the manifest is named after it.
    run.outputs.insert(0, Artifact::new(&args.trace, trace_to_json(&trace) + "\n"));
    if let Some(svg) = &args.svg {
        run.outputs.insert(1, Artifact::new(svg, render_svg(&trace)));
    }
    Ok(run)
}

fn cached(
    args: &SimulateArgs,
    doc: &PlanDocument,
    profiles: &ProfileSet,
    run: &mut Run,
) -> Result<adapterpipe::sim::ScheduleTrace, CliError> {
    let samples = args.samples.ok_or_else(|| CliError::invalid("--cached needs --samples"))?;
    if samples == 0 || args.epochs == 0 || !(args.disk_mbps.is_finite() && args.disk_mbps > 0.0) {
        return Err(CliError::invalid("--samples, --epochs and --disk-mbps must be positive"));
    }
    let cache = match (&args.cache_dir, args.modeled_cache) {
        (Some(dir), _) => {
            let info = cache_on_disk(dir, &doc.model, profiles.seq_len, samples)?;
            run.inputs.extend([dir.join(HEADER_FILE), dir.join(RECORDS_FILE)]);
            info
        }
        (None, true) => CacheInfo {
            sample_count: samples,
            bytes_per_sample: cache_storage_bytes(&doc.model, 1, profiles.seq_len) + RECORD_HEADER_BYTES,
        },
        (None, false) => {
            return Err(CliError::invalid("--cached needs a populated cache: pass --cache-dir or --modeled-cache"))
        }
    };
    let cfg = CachedEpochConfig {
        num_samples: samples,
        mini_batch_samples: doc.plan.micro_batch_size * doc.plan.num_micro_batches,
        disk_bytes_per_s: args.disk_mbps * 1e6,
    };
    run.param("samples", samples);
    run.param("cache_bytes_per_sample", cache.bytes_per_sample);
    run.param("cache_source", if args.cache_dir.is_some() { "directory" } else { "modeled" });
    run.param("disk_mbps", args.disk_mbps);
    run.param("epochs", args.epochs);
    run.param("redistribution", args.redistribution);
    let trace = simulate_cached_epoch(&doc.model, profiles, &cache, &cfg)?;
    let estimate =
        estimate_run(&doc.model, profiles, &doc.plan, &cache, &cfg, args.epochs, args.redistribution.into())?;
    run.say(format!("pipelined epoch {:.3} ms", us_to_ms(estimate.phase_one_epoch_us)));
    run.say(format!("cached epoch    {:.3} ms", us_to_ms(estimate.cached_epoch_us)));
    run.say(format!("reduction       {:.2}%", 100.0 * estimate.cached_reduction));
    run.say(format!(
        "redistribution  {:.3} ms ({:.2}% of a {}-epoch run)",
        us_to_ms(estimate.redistribution.total_us()),
        100.0 * estimate.redistribution_share,
        args.epochs
    ));
    if let Some(path) = &args.summary {
        #[derive(Serialize)]
        struct Summary<'a> {
            schema_version: u32,
            samples: usize,
            bytes_per_sample: u64,
            disk_mbps: f64,
            redistribution_mode: Redistribution,
            estimate: &'a adapterpipe::sim::RunEstimate,
        }
        let s = Summary {
            schema_version: 1,
            samples,
            bytes_per_sample: cache.bytes_per_sample,
            disk_mbps: args.disk_mbps,
            redistribution_mode: args.redistribution,
            estimate: &estimate,
        };
        run.outputs.push(Artifact::new(path, serde_json::to_string_pretty(&s).expect("summary serializes") + "\n"));
    }
    Ok(trace)
}

fn cache_on_disk(dir: &Path, spec: &ModelSpec, seq_len: usize, samples: usize) -> Result<CacheInfo, CliError> {
    if !dir.join(HEADER_FILE).is_file() {
        return Err(CliError::invalid(format!("no populated activation cache at `{}`", dir.display())));
    }
    let store = CacheStore::open_unchecked(dir)?;
    let layout = store.layout();
    if layout.hidden != spec.hidden_size
        || layout.tensors_per_sample != spec.cached_tensors()
        || layout.seq_len != seq_len
    {
        return Err(CliError::invalid(format!(
            "activation cache at `{}` holds {}x{}x{} taps per sample, but the plan needs {}x{}x{}",
            dir.display(),
            layout.tensors_per_sample,
            layout.seq_len,
            layout.hidden,
            spec.cached_tensors(),
            seq_len,
            spec.hidden_size
        )));
    }
    if store.len() < samples {
        return Err(CliError::invalid(format!(
            "activation cache at `{}` holds {} of {samples} samples",
            dir.display(),
            store.len()
        )));
    }
    Ok(CacheInfo { sample_count: store.len(), bytes_per_sample: layout.record_bytes() })
}
