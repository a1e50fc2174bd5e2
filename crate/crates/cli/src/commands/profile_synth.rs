use std::path::PathBuf;

use adapterpipe::profile::synthesize_profiles;
use clap::Args;

use crate::artifacts::{Artifact, Run};
use crate::error::CliError;
use crate::inputs::{load_model, parse_synth};

/// Write a synthetic device profile file for a model.
#[derive(Debug, Clone, Args)]
pub struct ProfileSynthArgs {
    /// Model spec file or bundled model name.
    #[arg(long)]
    pub model: String,
    /// `n=<k>,het=<h>,seed=<s>[,seq=..][,mb=..][,mem_gib=..][,gflops=..]`.
    #[arg(long, value_name = "SPEC")]
    pub synth: String,
    /// Profile JSON output.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

pub fn run(args: &ProfileSynthArgs) -> Result<Run, CliError> {
    let mut run = Run::default();
    let spec = load_model(&args.model, &mut run)?;
    let cfg = parse_synth(&args.synth)?;
    run.seeds.insert("synth".into(), cfg.seed);
    run.param("synth", &cfg);
    let profiles = synthesize_profiles(&spec, &cfg);
    run.say(format!(
        "{} devices, {} layers, micro-batch 1..={}, seq_len {}",
        profiles.devices.len(),
        profiles.num_layers(),
        cfg.max_micro_batch,
        cfg.seq_len
    ));
    run.outputs.push(Artifact::new(&args.out, profiles.to_json() + "\n"));
    Ok(run)
}
