use std::path::PathBuf;

use adapterpipe::par::Execution;
use adapterpipe::planner::{brute_force_oracle, select_plan, Objective, PlanDocument, Selection};
use adapterpipe::profile::us_to_ms;
use clap::Args;

use crate::artifacts::{Artifact, Run};
use crate::error::CliError;
use crate::inputs::{load_model, ProfileSource};

/// Choose stage boundaries and device groups.
#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    /// Model spec file or bundled model name.
    #[arg(long)]
    pub model: String,
    #[command(flatten)]
    pub source: ProfileSource,
    /// Micro-batch size.
    #[arg(short = 'B', long = "micro-batch")]
    pub micro_batch: usize,
    /// Micro-batches per mini-batch.
    #[arg(short = 'M', long = "micro-batches")]
    pub micro_batches: usize,
    /// Plan JSON output.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Cross-check against exhaustive search (small instances only).
    #[arg(long)]
    pub oracle: bool,
    /// Fill the DP table on one thread.
    #[arg(long)]
    pub sequential: bool,
}

pub fn run(args: &PlanArgs) -> Result<Run, CliError> {
    let mut run = Run::default();
    let spec = load_model(&args.model, &mut run)?;
    let profiles = args.source.load(&spec, &mut run)?;
    run.param("micro_batch_size", args.micro_batch);
    run.param("num_micro_batches", args.micro_batches);
    run.param("oracle", args.oracle);
    let exec = if args.sequential { Execution::Sequential } else { Execution::Parallel };
    let selection = select_plan(&spec, &profiles, args.micro_batch, args.micro_batches, exec)?;
    describe(&selection, &mut run);
    if args.oracle {
        check_oracle(&spec, &profiles, args, &selection, &mut run)?;
    }
    let doc = PlanDocument::new(&spec, &profiles, &selection);
    run.outputs.push(Artifact::new(&args.out, doc.to_json() + "\n"));
    Ok(run)
}

fn describe(selection: &Selection, run: &mut Run) {
    for c in &selection.candidates {
        let line = match (c.objective_us, &c.rejected) {
            (Some(obj), _) => format!("  s={:<3} objective {:>12.3} ms", c.num_stages, us_to_ms(obj)),
            (None, Some(why)) => format!("  s={:<3} rejected: {why}", c.num_stages),
            (None, None) => format!("  s={:<3} no partition", c.num_stages),
        };
        run.say(line);
    }
    let best = &selection.best;
    run.say(format!("chosen: {} stages, objective {:.3} ms", best.num_stages, best.objective_ms));
    for (i, st) in best.partition.stages.iter().enumerate() {
        run.say(format!(
            "  stage {i}: layers {}..={} on {} device(s) {:?}",
            st.first_layer,
            st.last_layer,
            st.devices.len(),
            st.devices
        ));
    }
}

fn check_oracle(
    spec: &adapterpipe::model_cost::ModelSpec,
    profiles: &adapterpipe::profile::ProfileSet,
    args: &PlanArgs,
    selection: &Selection,
    run: &mut Run,
) -> Result<(), CliError> {
    let oracle = brute_force_oracle(spec, profiles, args.micro_batch, args.micro_batches)?;
    for c in &selection.candidates {
        let expected = oracle.per_stage.get(c.num_stages - 1).and_then(|o| o.as_ref().map(|(v, _)| *v));
        if c.bottleneck_us != expected {
            return Err(CliError::Mismatch(format!(
                "oracle mismatch at {} stages: DP slowest stage {:?} us, exhaustive {:?} us",
                c.num_stages, c.bottleneck_us, expected
            )));
        }
    }
    let expected = oracle.best(Objective::PhaseLatency);
    if Some(selection.best.objective_us()) != expected {
        return Err(CliError::Mismatch(format!(
            "oracle mismatch: chosen objective {} us, exhaustive {:?} us",
            selection.best.objective_us(),
            expected
        )));
    }
    run.say(format!("oracle: agrees after {} enumerated plans", oracle.enumerated));
    Ok(())
}
