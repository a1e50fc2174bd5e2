//! `adapterpipe`: profile, plan, simulate, fine-tune a toy model, report,
//! and replay any of those from its manifest.

mod artifacts;
mod commands;
mod error;
mod inputs;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use artifacts::{default_manifest_path, sha256_file, sha256_hex, write_atomic, Manifest, Run};
use commands::{plan, profile_synth, report, simulate, tune_toy};
use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "adapterpipe",
    version,
    about = "Plan, simulate and cost side-network adapter fine-tuning on a cluster of small devices"
)]
struct Cli {
    /// Where to write the run manifest; defaults to the first output with a
    /// `.manifest.json` extension.
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    ProfileSynth(profile_synth::ProfileSynthArgs),
    Plan(plan::PlanArgs),
    Simulate(simulate::SimulateArgs),
    TuneToy(tune_toy::TuneToyArgs),
    Report(report::ReportArgs),
    /// Re-run a recorded invocation and compare every artifact hash.
    Replay {
        #[arg(value_name = "MANIFEST")]
        from: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::ProfileSynth(_) => "profile-synth",
            Command::Plan(_) => "plan",
            Command::Simulate(_) => "simulate",
            Command::TuneToy(_) => "tune-toy",
            Command::Report(_) => "report",
            Command::Replay { .. } => "replay",
        }
    }

    /// `scratch` redirects the activation cache during a replay so the
    /// original is left untouched.
    fn execute(&self, scratch: Option<&Path>) -> Result<Run, CliError> {
        match self {
            Command::ProfileSynth(a) => profile_synth::run(a),
            Command::Plan(a) => plan::run(a),
            Command::Simulate(a) => simulate::run(a),
            Command::TuneToy(a) => tune_toy::run(a, scratch),
            Command::Report(a) => report::run(a),
            Command::Replay { .. } => Err(CliError::invalid("a manifest cannot replay another replay")),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let outcome = match &cli.command {
        Command::Replay { from } => replay(from),
        cmd => record(cmd, argv, cli.manifest.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn record(cmd: &Command, argv: Vec<String>, manifest_path: Option<&Path>) -> Result<(), CliError> {
    let mut run = cmd.execute(None)?;
    for a in &run.outputs {
        write_atomic(&a.path, &a.bytes)?;
    }
    let manifest = Manifest::new(cmd.name(), strip_manifest_flag(argv), &run)?;
    let path = match manifest_path {
        Some(p) => p.to_path_buf(),
        None => default_manifest_path(&manifest.outputs.first().expect("every subcommand writes an artifact").path),
    };
    write_atomic(&path, manifest.to_json().as_bytes())?;
    for line in &run.messages {
        println!("{line}");
    }
    for o in &manifest.outputs {
        println!("wrote {}", o.path.display());
    }
    println!("wrote {}", path.display());
    run.failure.take().map_or(Ok(()), Err)
}

/// The manifest location does not affect any artifact, so it is not part
/// of the replayable command line.
fn strip_manifest_flag(argv: Vec<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(argv.len());
    let mut skip = false;
    for a in argv {
        if skip {
            skip = false;
        } else if a == "--manifest" {
            skip = true;
        } else if !a.starts_with("--manifest=") {
            out.push(a);
        }
    }
    out
}

fn replay(from: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(from).map_err(|e| CliError::io(from, e))?;
    let manifest = Manifest::from_json(&text)?;
    for input in &manifest.inputs {
        let now = sha256_file(&input.path)?;
        if now != input.sha256 {
            return Err(CliError::Mismatch(format!("input `{}` changed since the recorded run", input.path.display())));
        }
    }
    let cli = Cli::try_parse_from(std::iter::once("adapterpipe".to_string()).chain(manifest.argv.iter().cloned()))
        .map_err(|e| CliError::invalid(format!("manifest command line no longer parses: {e}")))?;
    if cli.command.name() != manifest.subcommand {
        return Err(CliError::invalid("manifest subcommand does not match its command line"));
    }
    let scratch = tempfile::tempdir().map_err(|e| CliError::Io(format!("cannot create scratch directory: {e}")))?;
    let run = cli.command.execute(Some(&scratch.path().join("cache")))?;
    let mut produced: Vec<(PathBuf, String)> =
        run.outputs.iter().map(|a| (a.path.clone(), sha256_hex(&a.bytes))).collect();
    for (logical, actual) in &run.side_outputs {
        produced.push((logical.clone(), sha256_file(actual)?));
    }
    let mut mismatches = 0;
    for expected in &manifest.outputs {
        let status = match produced.iter().find(|(p, _)| *p == expected.path) {
            Some((_, h)) if *h == expected.sha256 => "identical",
            Some(_) => "DIFFERS",
            None => "MISSING",
        };
        mismatches += usize::from(status != "identical");
        println!("{status:<9} {}", expected.path.display());
    }
    for (p, _) in &produced {
        if !manifest.outputs.iter().any(|o| o.path == *p) {
            mismatches += 1;
            println!("{:<9} {}", "EXTRA", p.display());
        }
    }
    if mismatches > 0 {
        return Err(CliError::Mismatch(format!("replay differs from the manifest in {mismatches} artifact(s)")));
    }
    println!("replay: {} artifact(s) byte-identical", manifest.outputs.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn manifest_flag_is_stripped() {
        let argv = ["plan", "--manifest", "m.json", "--out", "p.json", "--manifest=x"].map(String::from).to_vec();
        assert_eq!(strip_manifest_flag(argv), ["plan", "--out", "p.json"]);
    }
}
