use adapterpipe::model_cost::reference_spec;
use adapterpipe::par::Execution;
use adapterpipe::planner::{dp_partition, select_plan, StageModel};
use adapterpipe::profile::{synthesize_profiles, SynthConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn dp_table(c: &mut Criterion) {
    let mut group = c.benchmark_group("dp_partition");
    group.sample_size(10);
    for (name, devices) in [("bart-large", 8), ("t5-large", 16)] {
        let spec = reference_spec(name).unwrap();
        let profiles = synthesize_profiles(&spec, &SynthConfig::new(devices, 0.3, 1));
        let model = StageModel::new(&spec, &profiles, 16).unwrap();
        for exec in [Execution::Sequential, Execution::Parallel] {
            let id = BenchmarkId::new(format!("{exec:?}"), format!("{name}-L{}-D{devices}", spec.num_layers));
            group.bench_with_input(id, &exec, |b, &exec| b.iter(|| dp_partition(black_box(&model), exec)));
        }
    }
    group.finish();
}

fn full_selection(c: &mut Criterion) {
    let mut group = c.benchmark_group("select_plan");
    group.sample_size(10);
    let spec = reference_spec("t5-large").unwrap();
    let profiles = synthesize_profiles(&spec, &SynthConfig::new(16, 0.3, 1));
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| b.iter(|| select_plan(&spec, black_box(&profiles), 16, 8, exec)));
    }
    group.finish();
}

criterion_group!(benches, dp_table, full_selection);
criterion_main!(benches);
