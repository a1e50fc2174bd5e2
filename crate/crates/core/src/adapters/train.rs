//! SGD over mini-batches, with optional reuse of cached backbone taps.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache_store::{CacheEntry, CacheLayout, CacheStore, SampleId};

use super::{AdapterError, AdapterState, Backbone, Census, Tensor, ToyDims};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub label: usize,
}

/// Where taps come from during an epoch.
pub enum TapCache<'a> {
    /// Always run the backbone.
    Off,
    /// Serve hits from the cache; on a miss run the backbone and store.
    ReadWrite(&'a mut CacheStore),
    /// Serve from the cache; a miss is an error.
    ReadOnly(&'a CacheStore),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// Loss of every step, before that step's update.
    pub losses: Vec<f64>,
    pub census: Census,
    pub cache_hits: usize,
    pub cache_writes: usize,
}

impl EpochReport {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }
}

/// Classes own disjoint, equal bands of the vocabulary; sample `i` has
/// label `i mod classes` and draws every token from its class band.
pub fn separable_dataset(dims: &ToyDims, num_samples: usize, seq_len: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let band = (dims.vocab / dims.classes).max(1);
    (0..num_samples)
        .map(|i| {
            let label = i % dims.classes;
            let lo = (label * band) as u32;
            let tokens = (0..seq_len).map(|_| lo + rng.random_range(0..band as u32)).collect();
            Sample { tokens, label }
        })
        .collect()
}

/// Stacks per-sample taps row-wise: result `i` holds `b_i` of every sample.
pub fn stack_taps(per_sample: &[Vec<Tensor>]) -> Vec<Tensor> {
    let count = per_sample.first().map_or(0, Vec::len);
    (0..count).map(|i| Tensor::vstack(&per_sample.iter().map(|t| &t[i]).collect::<Vec<_>>())).collect()
}

pub fn cache_layout(backbone: &Backbone, seq_len: usize) -> CacheLayout {
    CacheLayout {
        fingerprint: backbone.fingerprint(),
        tensors_per_sample: backbone.dims().num_layers + 1,
        seq_len,
        hidden: backbone.dims().hidden,
        scalar_bytes: 8,
    }
}

fn taps_for(
    backbone: &Backbone,
    sample: &Sample,
    cache: &mut TapCache<'_>,
    census: &mut Census,
    report: &mut EpochReport,
) -> Result<Vec<Tensor>, AdapterError> {
    let id = SampleId::of_tokens(&sample.tokens);
    match cache {
        TapCache::Off => backbone.forward(&sample.tokens, census),
        TapCache::ReadOnly(store) => {
            report.cache_hits += 1;
            Ok(store.get(&id)?.tensors)
        }
        TapCache::ReadWrite(store) => {
            if store.contains(&id) {
                report.cache_hits += 1;
                return Ok(store.get(&id)?.tensors);
            }
            let taps = backbone.forward(&sample.tokens, census)?;
            let entry = CacheEntry { sample_id: id, seq_len: sample.tokens.len(), tensors: taps };
            store.put(&entry)?;
            report.cache_writes += 1;
            Ok(entry.tensors)
        }
    }
}

fn check_cache(cache: &TapCache<'_>, backbone: &Backbone) -> Result<(), AdapterError> {
    let layout = match cache {
        TapCache::Off => return Ok(()),
        TapCache::ReadWrite(s) => s.layout(),
        TapCache::ReadOnly(s) => s.layout(),
    };
    if layout.fingerprint != backbone.fingerprint() {
        return Err(crate::cache_store::CacheError::FingerprintMismatch {
            expected: backbone.fingerprint(),
            found: layout.fingerprint.clone(),
        }
        .into());
    }
    if layout.scalar_bytes != 8 {
        return Err(AdapterError::Spec("training needs a full-precision (8-byte) cache".into()));
    }
    Ok(())
}

/// One pass over `data` in order, in mini-batches of `cfg.batch_size`.
pub fn train_epoch(
    backbone: &Backbone,
    adapters: &mut AdapterState,
    data: &[Sample],
    cfg: &TrainConfig,
    mut cache: TapCache<'_>,
) -> Result<EpochReport, AdapterError> {
    if cfg.batch_size == 0 {
        return Err(AdapterError::Shape("batch size must be positive".into()));
    }
    check_cache(&cache, backbone)?;
    let mut report = EpochReport { losses: Vec::new(), census: Census::default(), cache_hits: 0, cache_writes: 0 };
    for batch in data.chunks(cfg.batch_size) {
        let mut census = Census::default();
        let mut taps = Vec::with_capacity(batch.len());
        for s in batch {
            taps.push(taps_for(backbone, s, &mut cache, &mut census, &mut report)?);
        }
        let stacked = stack_taps(&taps);
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let pass = adapters.forward(&stacked, batch.len(), &mut census)?;
        report.losses.push(AdapterState::loss(&pass, &labels, cfg.loss_scale)?);
        let grads = adapters.backward(pass, &labels, cfg.loss_scale, &mut census)?;
        adapters.sgd_step(&grads, cfg.learning_rate);
        report.census.merge(&census);
    }
    Ok(report)
}

/// A complete toy fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub dims: ToyDims,
    pub seed: u64,
    pub num_samples: usize,
    pub seq_len: usize,
    pub epochs: usize,
    pub train: TrainConfig,
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub backbone_fingerprint: String,
    pub epochs: Vec<EpochReport>,
    pub params: AdapterState,
}

/// The seeded starting point of a [`fit`] run.
#[derive(Debug, Clone)]
pub struct FitSetup {
    pub backbone: Backbone,
    pub adapters: AdapterState,
    pub data: Vec<Sample>,
}

impl FitSetup {
    /// Backbone, side network and dataset seeds are drawn in that order
    /// from `cfg.seed`.
    pub fn new(cfg: &FitConfig) -> Self {
        let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (bb_seed, side_seed, data_seed) = (seeds.random(), seeds.random(), seeds.random());
        FitSetup {
            backbone: Backbone::seeded(cfg.dims, bb_seed),
            adapters: AdapterState::seeded(&cfg.dims, side_seed, cfg.init_std),
            data: separable_dataset(&cfg.dims, cfg.num_samples, cfg.seq_len, data_seed),
        }
    }
}

/// Trains from [`FitSetup::new`]. With `cache_dir` the first epoch fills the
/// cache and later epochs read only from it; the cache is left in place.
pub fn fit(cfg: &FitConfig, cache_dir: Option<&Path>) -> Result<FitResult, AdapterError> {
    let FitSetup { backbone, mut adapters, data } = FitSetup::new(cfg);
    let mut store = match cache_dir {
        Some(dir) => Some(CacheStore::create(dir, cache_layout(&backbone, cfg.seq_len))?),
        None => None,
    };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let cache = match store.as_mut() {
            None => TapCache::Off,
            Some(s) if e == 0 => TapCache::ReadWrite(s),
            Some(s) => TapCache::ReadOnly(s),
        };
        epochs.push(train_epoch(&backbone, &mut adapters, &data, &cfg.train, cache)?);
    }
    Ok(FitResult { backbone_fingerprint: backbone.fingerprint(), epochs, params: adapters })
}
