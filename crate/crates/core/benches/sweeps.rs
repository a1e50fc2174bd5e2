//! Independent plan-and-simulate runs over seeds, the shape of a
//! heterogeneity sensitivity sweep.

use adapterpipe::model_cost::reference_spec;
use adapterpipe::par::Execution;
use adapterpipe::planner::select_plan;
use adapterpipe::profile::{synthesize_profiles, SynthConfig};
use adapterpipe::sim::simulate_1f1b;
use criterion::{criterion_group, criterion_main, Criterion};

fn sweep(exec: Execution, runs: usize) -> u64 {
    let spec = reference_spec("bart-large").unwrap();
    exec.map_range(runs, |i| {
        let profiles = synthesize_profiles(&spec, &SynthConfig::new(8, 0.4, i as u64));
        let plan = select_plan(&spec, &profiles, 8, 8, Execution::Sequential).unwrap().best;
        simulate_1f1b(&spec, &profiles, &plan).unwrap().makespan_us
    })
    .into_iter()
    .sum()
}

fn seeds(c: &mut Criterion) {
    let mut group = c.benchmark_group("seed_sweep");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| b.iter(|| sweep(exec, 16)));
    }
    group.finish();
}

criterion_group!(benches, seeds);
criterion_main!(benches);
