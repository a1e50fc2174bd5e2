//! Resolving model specs and device profiles from flags.

use std::path::{Path, PathBuf};

use adapterpipe::model_cost::{reference_spec, ModelSpec};
use adapterpipe::profile::{load_profiles, synthesize_profiles, ProfileSet, SynthConfig};
use clap::Args;

use crate::artifacts::Run;
use crate::error::CliError;

/// A file path, or the name of a bundled reference architecture
/// (`t5-base`, `t5-large`, `bart-large`, `bart-large-x2`).
pub fn load_model(arg: &str, run: &mut Run) -> Result<ModelSpec, CliError> {
    let path = Path::new(arg);
    let spec = if path.exists() {
        run.inputs.push(path.to_path_buf());
        ModelSpec::load(path)?
    } else if let Some(spec) = reference_spec(arg) {
        spec
    } else {
        return Err(CliError::invalid(format!("`{arg}` is neither a model spec file nor a bundled model name")));
    };
    run.param("model", &spec.name);
    run.param("model_fingerprint", spec.fingerprint());
    Ok(spec)
}

/// `--synth n=<k>,het=<h>,seed=<s>` with optional `seq=`, `mb=` (largest
/// profiled micro-batch), `mem_gib=`, `gflops=`.
pub fn parse_synth(text: &str) -> Result<SynthConfig, CliError> {
    let mut n = None;
    let mut het = None;
    let mut seed = None;
    let mut cfg = SynthConfig::new(1, 0.0, 0);
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::invalid(format!("--synth: expected key=value, got `{part}`")))?;
        let bad = |what: &str| CliError::invalid(format!("--synth: `{value}` is not a valid {what} for `{key}`"));
        match key {
            "n" => n = Some(value.parse::<usize>().map_err(|_| bad("device count"))?),
            "het" => het = Some(value.parse::<f64>().map_err(|_| bad("number"))?),
            "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad("seed"))?),
            "seq" => cfg.seq_len = value.parse().map_err(|_| bad("sequence length"))?,
            "mb" => cfg.max_micro_batch = value.parse().map_err(|_| bad("micro-batch size"))?,
            "mem_gib" => {
                let gib: f64 = value.parse().map_err(|_| bad("number"))?;
                if !(gib.is_finite() && gib > 0.0) {
                    return Err(bad("positive size"));
                }
                cfg.memory_budget_bytes = (gib * (1u64 << 30) as f64).round() as u64;
            }
            "gflops" => cfg.device_gflops = value.parse().map_err(|_| bad("number"))?,
            _ => return Err(CliError::invalid(format!("--synth: unknown key `{key}`"))),
        }
    }
    let missing = |k: &str| CliError::invalid(format!("--synth: `{k}=` is required"));
    cfg.n_devices = n.ok_or_else(|| missing("n"))?;
    cfg.heterogeneity = het.ok_or_else(|| missing("het"))?;
    cfg.seed = seed.ok_or_else(|| missing("seed"))?;
    if cfg.n_devices == 0 {
        return Err(CliError::invalid("--synth: n must be at least 1"));
    }
    if !(0.0..1.0).contains(&cfg.heterogeneity) {
        return Err(CliError::invalid("--synth: het must lie in [0, 1)"));
    }
    if cfg.seq_len == 0 || cfg.max_micro_batch == 0 || !(cfg.device_gflops.is_finite() && cfg.device_gflops > 0.0) {
        return Err(CliError::invalid("--synth: seq, mb and gflops must be positive"));
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Args)]
#[group(required = true, multiple = false)]
pub struct ProfileSource {
    /// Device profile file.
    #[arg(long, value_name = "PATH")]
    pub profiles: Option<PathBuf>,
    /// Synthesize profiles: `n=<k>,het=<h>,seed=<s>[,seq=..][,mb=..][,mem_gib=..][,gflops=..]`.
    #[arg(long, value_name = "SPEC")]
    pub synth: Option<String>,
}

impl ProfileSource {
    pub fn load(&self, spec: &ModelSpec, run: &mut Run) -> Result<ProfileSet, CliError> {
        match (&self.profiles, &self.synth) {
            (Some(path), _) => {
                run.inputs.push(path.clone());
                run.param("profiles", "file");
                load_profiles(path).map_err(CliError::from)
            }
            (None, Some(text)) => {
                let cfg = parse_synth(text)?;
                run.seeds.insert("synth".into(), cfg.seed);
                run.param("synth", &cfg);
                Ok(synthesize_profiles(spec, &cfg))
            }
            (None, None) => Err(CliError::invalid("one of --profiles or --synth is required")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_keys() {
        let c = parse_synth("n=8,het=0.3,seed=7,seq=16,mem_gib=0.5").unwrap();
        assert_eq!((c.n_devices, c.seed, c.seq_len), (8, 7, 16));
        assert_eq!(c.heterogeneity, 0.3);
        assert_eq!(c.memory_budget_bytes, 1 << 29);
    }

    #[test]
    fn synth_rejects_bad_input() {
        for bad in [
            "n=8,het=0.3",
            "n=0,het=0,seed=1",
            "n=2,het=1.0,seed=1",
            "n=2,het=0,seed=x",
            "n=2,het=0,seed=1,foo=2",
            "n2",
        ] {
            assert!(parse_synth(bad).is_err(), "{bad}");
        }
    }
}
