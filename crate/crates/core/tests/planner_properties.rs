use adapterpipe::model_cost::{ModelSpec, Technique};
use adapterpipe::par::Execution;
use adapterpipe::planner::{brute_force_oracle, dp_partition, select_plan, Objective, StageModel};
use adapterpipe::profile::{synthesize_profiles, ProfileSet, SynthConfig};
use proptest::prelude::*;

fn spec(layers: usize, technique: Technique) -> ModelSpec {
    ModelSpec {
        name: format!("prop-{layers}"),
        num_layers: layers,
        decoder_layers: layers / 2,
        hidden_size: 64,
        num_heads: 4,
        ffn_mult: 4,
        vocab_size: 100,
        bytes_per_scalar: 4,
        technique,
        adapter_reduction: 8,
        lora_rank: 8,
        num_classes: 2,
        cache_layers: None,
        count_attention_scores: false,
    }
}

fn profiles(spec: &ModelSpec, devices: usize, het: f64, seed: u64, max_mb: usize) -> ProfileSet {
    let mut cfg = SynthConfig::new(devices, het, seed);
    cfg.seq_len = 16;
    cfg.max_micro_batch = max_mb;
    cfg.device_gflops = 0.05;
    synthesize_profiles(spec, &cfg)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dp_matches_exhaustive_search(layers in 1usize..=6, devices in 1usize..=4, het in 0.0f64..=0.5, seed in 0u64..1000, m in 1usize..=6) {
        let sp = spec(layers, Technique::ParallelAdapters);
        let p = profiles(&sp, devices, het, seed, 12);
        let oracle = brute_force_oracle(&sp, &p, 12, m).unwrap();
        let model = StageModel::new(&sp, &p, 12).unwrap();
        let table = dp_partition(&model, Execution::Sequential);
        for s in 1..=layers.min(devices) {
            prop_assert_eq!(table.best(s), oracle.per_stage[s - 1].as_ref().map(|(t, _)| *t));
        }
        let sel = select_plan(&sp, &p, 12, m, Execution::Parallel).ok();
        prop_assert_eq!(sel.map(|s| s.best.objective_us()), oracle.best(Objective::PhaseLatency));
    }

    #[test]
    fn more_identical_devices_never_slow_a_stage_count(layers in 1usize..=6, devices in 2usize..=5, technique in prop::sample::select(Technique::ALL.to_vec())) {
        // Every group size up to 5 divides 60, and identical devices keep
        // group maxima equal to any single member.
        let sp = spec(layers, technique);
        let p = profiles(&sp, devices, 0.0, 0, 60);
        let model = StageModel::new(&sp, &p, 60).unwrap();
        let t = dp_partition(&model, Execution::Sequential);
        for s in 1..=t.max_stages() {
            for y in 0..layers {
                for n in 1..devices {
                    if let (Some(a), Some(b)) = (t.get(s, y, n), t.get(s, y, n + 1)) {
                        prop_assert!(b <= a, "s={} y={} n={}: {} -> {}", s, y, n, a, b);
                    }
                }
            }
        }
    }

    #[test]
    fn sequential_and_parallel_selection_agree(layers in 1usize..=8, devices in 1usize..=5, het in 0.0f64..=0.5, seed in 0u64..1000) {
        let sp = spec(layers, Technique::ParallelAdapters);
        let p = profiles(&sp, devices, het, seed, 12);
        let a = select_plan(&sp, &p, 12, 4, Execution::Sequential).map(|s| format!("{:?}", s.best)).ok();
        let b = select_plan(&sp, &p, 12, 4, Execution::Parallel).map(|s| format!("{:?}", s.best)).ok();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn large_instance_plans_quickly() {
    let sp = spec(48, Technique::ParallelAdapters);
    let p = profiles(&sp, 16, 0.3, 5, 16);
    let start = std::time::Instant::now();
    let sel = select_plan(&sp, &p, 16, 8, Execution::Parallel).unwrap();
    assert!(start.elapsed().as_secs_f64() < 3.0);
    assert!(sel.best.num_stages >= 1);
}
