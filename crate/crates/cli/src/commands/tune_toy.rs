use std::path::{Path, PathBuf};

use adapterpipe::adapters::{cache_layout, fit, Census, FitConfig, FitResult, FitSetup, ToyDims, TrainConfig};
use adapterpipe::cache_store::{clear_dir, CacheStore, SampleId, HEADER_FILE, RECORDS_FILE};
use adapterpipe::model_cost::cache_storage_bytes;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::artifacts::{sha256_hex, Artifact, Run};
use crate::error::CliError;
use crate::inputs::load_model;

pub const TUNE_REPORT_SCHEMA_VERSION: u32 = 1;

/// Fine-tune the side network of a toy transformer.
#[derive(Debug, Clone, Args)]
pub struct TuneToyArgs {
    /// Toy model spec (encoder-only, small).
    #[arg(long)]
    pub spec: String,
    /// Training samples, drawn from a class-separable synthetic task.
    #[arg(long)]
    pub samples: usize,
    #[arg(long)]
    pub epochs: usize,
    /// Cache backbone activations in epoch 1 and reuse them afterwards; the
    /// run is repeated without the cache and both are compared.
    #[arg(long)]
    pub cache: bool,
    /// Cache location; defaults to `<report>.cache`. Any cache already there
    /// is cleared first.
    #[arg(long, value_name = "DIR", requires = "cache")]
    pub cache_dir: Option<PathBuf>,
    /// Leave the populated cache on disk.
    #[arg(long, requires = "cache")]
    pub keep_cache: bool,
    /// Seeds the backbone, side network and data.
    #[arg(long)]
    pub seed: u64,
    /// Report JSON: losses, operation census and the cached/uncached comparison.
    #[arg(long, value_name = "PATH")]
    pub report: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub loss_scale: f64,
    #[arg(long, default_value_t = adapterpipe::adapters::DEFAULT_INIT_STD)]
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub mean_loss: f64,
    pub losses: Vec<f64>,
    pub census: Census,
    pub cache_hits: usize,
    pub cache_writes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSummary {
    pub samples: usize,
    pub record_bytes: u64,
    pub payload_bytes: u64,
    /// Analytic size of the same cache.
    pub formula_bytes: u64,
    pub file_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub steps_compared: usize,
    pub max_abs_loss_diff: f64,
    pub params_bitwise_equal: bool,
    /// Samples whose cached taps equal a fresh backbone pass bit for bit.
    pub stable_taps: usize,
    pub checked_taps: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub schema_version: u32,
    pub config: FitConfig,
    pub backbone_fingerprint: String,
    pub trainable_params: usize,
    /// SHA-256 of the final parameters as little-endian f64 bits.
    pub final_params_sha256: String,
    pub epochs: Vec<EpochSummary>,
    pub cache: Option<CacheSummary>,
    pub equivalence: Option<Equivalence>,
}

/// Loss tolerance for the cached/uncached comparison.
pub const LOSS_TOLERANCE: f64 = 1e-12;

pub fn run(args: &TuneToyArgs, scratch: Option<&Path>) -> Result<Run, CliError> {
    let mut run = Run::default();
    let spec = load_model(&args.spec, &mut run)?;
    let dims = ToyDims::from_spec(&spec)?;
    if args.samples == 0 || args.epochs == 0 || args.seq_len == 0 || args.batch_size == 0 {
        return Err(CliError::invalid("--samples, --epochs, --seq-len and --batch-size must be positive"));
    }
    if !(args.init_std.is_finite() && args.init_std > 0.0) || !args.lr.is_finite() || !args.loss_scale.is_finite() {
        return Err(CliError::invalid("--init-std must be positive and --lr, --loss-scale finite"));
    }
    let cfg = FitConfig {
        dims,
        seed: args.seed,
        num_samples: args.samples,
        seq_len: args.seq_len,
        epochs: args.epochs,
        train: TrainConfig { batch_size: args.batch_size, learning_rate: args.lr, loss_scale: args.loss_scale },
        init_std: args.init_std,
    };
    run.seeds.insert("fit".into(), args.seed);
    run.param("fit", &cfg);
    run.param("cache", args.cache);
    run.param("keep_cache", args.keep_cache);

    let plain = fit(&cfg, None)?;
    let mut report = summarize(&cfg, &plain);
    if args.cache {
        let logical = args.cache_dir.clone().unwrap_or_else(|| args.report.with_extension("cache"));
        let dir = scratch.map(Path::to_path_buf).unwrap_or_else(|| logical.clone());
        clear_dir(&dir)?;
        let cached = fit(&cfg, Some(&dir))?;
        let store = CacheStore::open(&dir, &cached.backbone_fingerprint)?;
        report.cache = Some(cache_summary(&cfg, &store)?);
        report.equivalence = Some(compare(&cfg, &plain, &cached, &store)?);
        report.epochs = summarize(&cfg, &cached).epochs;
        if args.keep_cache {
            for name in [HEADER_FILE, RECORDS_FILE] {
                run.side_outputs.push((logical.join(name), dir.join(name)));
            }
        } else {
            drop(store);
            clear_dir(&dir)?;
        }
    }

    for (i, e) in report.epochs.iter().enumerate() {
        run.say(format!(
            "epoch {}: mean loss {:.6}, backbone fwd {} FLOPs, backbone bwd {} FLOPs, cache hits {}",
            i + 1,
            e.mean_loss,
            e.census.backbone_fwd_flops,
            e.census.backbone_bwd_flops,
            e.cache_hits
        ));
    }
    if let Some(eq) = &report.equivalence {
        run.say(format!(
            "cached vs uncached: max loss diff {:e}, parameters bitwise equal: {}, stable taps {}/{}",
            eq.max_abs_loss_diff, eq.params_bitwise_equal, eq.stable_taps, eq.checked_taps
        ));
        if !eq.passed {
            run.failure = Some(CliError::Mismatch("cached and uncached runs disagree".into()));
        }
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    run.outputs.push(Artifact::new(&args.report, text));
    Ok(run)
}

fn params_digest(r: &FitResult) -> String {
    let bytes: Vec<u8> = r.params.flat().iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

fn summarize(cfg: &FitConfig, r: &FitResult) -> TuneReport {
    TuneReport {
        schema_version: TUNE_REPORT_SCHEMA_VERSION,
        config: cfg.clone(),
        backbone_fingerprint: r.backbone_fingerprint.clone(),
        trainable_params: r.params.param_count(),
        final_params_sha256: params_digest(r),
        epochs: r
            .epochs
            .iter()
            .map(|e| EpochSummary {
                mean_loss: e.mean_loss(),
                losses: e.losses.clone(),
                census: e.census,
                cache_hits: e.cache_hits,
                cache_writes: e.cache_writes,
            })
            .collect(),
        cache: None,
        equivalence: None,
    }
}

fn cache_summary(cfg: &FitConfig, store: &CacheStore) -> Result<CacheSummary, CliError> {
    let spec = cfg.dims.to_spec("toy");
    Ok(CacheSummary {
        samples: store.len(),
        record_bytes: store.layout().record_bytes(),
        payload_bytes: store.header().payload_bytes,
        formula_bytes: cache_storage_bytes(&spec, store.len(), cfg.seq_len),
        file_bytes: store.file_bytes()?,
    })
}

fn compare(
    cfg: &FitConfig,
    plain: &FitResult,
    cached: &FitResult,
    store: &CacheStore,
) -> Result<Equivalence, CliError> {
    let mut steps = 0;
    let mut max_diff: f64 = 0.0;
    for (a, b) in plain.epochs.iter().zip(&cached.epochs) {
        for (x, y) in a.losses.iter().zip(&b.losses) {
            max_diff = max_diff.max((x - y).abs());
            steps += 1;
        }
    }
    let bitwise = plain.params.flat().iter().zip(cached.params.flat()).all(|(a, b)| a.to_bits() == b.to_bits());
    let setup = FitSetup::new(cfg);
    if cache_layout(&setup.backbone, cfg.seq_len).fingerprint != store.layout().fingerprint {
        return Err(CliError::Mismatch("cache was built by a different backbone".into()));
    }
    let mut stable = 0;
    let mut census = Census::default();
    for s in &setup.data {
        let fresh = setup.backbone.forward(&s.tokens, &mut census)?;
        let stored = store.get(&SampleId::of_tokens(&s.tokens))?.tensors;
        let same = fresh.len() == stored.len()
            && fresh.iter().zip(&stored).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
        stable += usize::from(same);
    }
    let checked = setup.data.len();
    Ok(Equivalence {
        steps_compared: steps,
        max_abs_loss_diff: max_diff,
        params_bitwise_equal: bitwise,
        stable_taps: stable,
        checked_taps: checked,
        passed: max_diff <= LOSS_TOLERANCE && bitwise && stable == checked,
    })
}
