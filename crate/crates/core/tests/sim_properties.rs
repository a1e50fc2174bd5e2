use adapterpipe::model_cost::{ModelSpec, Technique};
use adapterpipe::planner::{evaluate_partition, phase_latencies, Partition, StageModel, StagePlan};
use adapterpipe::profile::{synthesize_profiles, LinkProfile, ProfileSet, SynthConfig};
use adapterpipe::sim::{
    render_svg, simulate_1f1b, simulate_partition, trace_from_json, trace_to_json, EventKind, ScheduleTrace,
};
use proptest::prelude::*;

fn spec(layers: usize, technique: Technique) -> ModelSpec {
    ModelSpec {
        name: "sim-prop".into(),
        num_layers: layers,
        decoder_layers: 0,
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

fn profiles(spec: &ModelSpec, devices: usize, het: f64, seed: u64, link: Option<LinkProfile>) -> ProfileSet {
    let mut cfg = SynthConfig::new(devices, het, seed);
    cfg.seq_len = 16;
    cfg.max_micro_batch = 12;
    cfg.device_gflops = 0.05;
    if let Some(l) = link {
        cfg.link = l;
    }
    synthesize_profiles(spec, &cfg)
}

fn partition(layers: &[usize], groups: &[usize]) -> Partition {
    let (mut l, mut d) = (0, 0);
    let stages = layers
        .iter()
        .zip(groups)
        .map(|(&nl, &nd)| {
            let st = StagePlan { first_layer: l, last_layer: l + nl - 1, devices: (d..d + nd).collect() };
            l += nl;
            d += nd;
            st
        })
        .collect();
    Partition { stages }
}

/// Splits `total` into `parts` positive sizes from `cuts`.
fn split(total: usize, parts: usize, cuts: &[usize]) -> Vec<usize> {
    let mut points: Vec<usize> = cuts.iter().map(|c| 1 + c % (total - 1).max(1)).collect();
    points.sort();
    points.dedup();
    points.truncate(parts - 1);
    while points.len() < parts - 1 {
        let next = (1..total).find(|p| !points.contains(p)).unwrap();
        points.push(next);
        points.sort();
    }
    let mut out = Vec::new();
    let mut prev = 0;
    for p in points.into_iter().chain([total]) {
        out.push(p - prev);
        prev = p;
    }
    out
}

fn check_invariants(t: &ScheduleTrace, part: &Partition, m: usize) {
    let s = part.stages.len();
    let stage_of = |d: usize| part.stages.iter().position(|st| st.devices.contains(&d)).unwrap();
    for d in 0..t.device_ids.len() {
        let mut cells: Vec<_> = t
            .events
            .iter()
            .filter(|e| e.device == d && matches!(e.kind, EventKind::FwdCell | EventKind::BwdCell))
            .collect();
        cells.sort_by_key(|e| e.start_us);
        for w in cells.windows(2) {
            assert!(w[0].end_us <= w[1].start_us, "compute overlap on device {d}");
        }
        // In-flight forwards never exceed s - stage.
        let bound = (s - stage_of(d)).min(m);
        let mut live = 0usize;
        for c in &cells {
            match c.kind {
                EventKind::FwdCell => live += 1,
                _ => live -= 1,
            }
            assert!(live <= bound, "device {d} holds {live} > {bound}");
        }
    }
    for e in &t.events {
        assert!(e.end_us >= e.start_us);
        if e.kind == EventKind::RecvAct {
            let send = t
                .events
                .iter()
                .find(|x| {
                    x.kind == EventKind::SendAct
                        && x.device == e.peer.unwrap()
                        && x.peer == Some(e.device)
                        && x.micro_batch == e.micro_batch
                })
                .expect("matching send");
            assert!(send.end_us <= e.start_us);
        }
        if e.kind == EventKind::FwdCell && e.stage + 1 == s {
            let bwd = t
                .events
                .iter()
                .find(|x| x.kind == EventKind::BwdCell && x.device == e.device && x.micro_batch == e.micro_batch)
                .unwrap();
            assert!(e.end_us <= bwd.start_us);
        }
    }
    assert_eq!(t.makespan_us, t.events.iter().map(|e| e.end_us).max().unwrap_or(0));
    let ph = t.phases.unwrap();
    assert_eq!(ph.beginning_us + ph.execution_us + ph.ending_us, t.makespan_us);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_plans_keep_schedule_invariants(
        layers in 1usize..=8,
        devices in 1usize..=6,
        stages in 1usize..=4,
        m in 1usize..=7,
        cuts in prop::collection::vec(0usize..100, 4),
        het in 0.0f64..0.5,
        seed in 0u64..100,
    ) {
        let s = stages.min(layers).min(devices);
        let sizes = split(layers, s, &cuts);
        let mut groups = split(devices, s, &cuts[1..]);
        // group sizes must divide B = 12
        for g in &mut groups {
            while 12 % *g != 0 { *g -= 1; }
        }
        let used: usize = groups.iter().sum();
        let sp = spec(layers, Technique::ParallelAdapters);
        let p = profiles(&sp, used, het, seed, None);
        let part = partition(&sizes, &groups);
        let model = StageModel::new(&sp, &p, 12).unwrap();
        let plan = evaluate_partition(&sp, &p, &model, &part, m).unwrap();
        let t = simulate_1f1b(&sp, &p, &plan).unwrap();
        check_invariants(&t, &part, m);
        prop_assert_eq!(&t.peak_memory_bytes, &plan.peak_memory_bytes);
        let again = simulate_1f1b(&sp, &p, &plan).unwrap();
        prop_assert_eq!(trace_to_json(&t), trace_to_json(&again));
    }

    #[test]
    fn uniform_plans_match_phase_model(
        unit in prop::sample::select(vec![vec![1usize], vec![1, 1], vec![1, 2], vec![2, 1], vec![1, 1, 1], vec![2, 1, 1], vec![1, 1, 1, 1], vec![4], vec![2, 2]]),
        per in 1usize..=2,
        m in 1usize..=8,
    ) {
        let layers: Vec<usize> = unit.iter().map(|g| g * per).collect();
        let total: usize = layers.iter().sum();
        let devices: usize = unit.iter().sum();
        let sp = spec(total, Technique::Adapters);
        let zero = LinkProfile { bandwidth_bytes_per_s: 1e30, latency_ms: 0.0 };
        let p = profiles(&sp, devices, 0.0, 0, Some(zero));
        let part = partition(&layers, &unit);
        let t = simulate_partition(&sp, &p, &part, 4, m).unwrap();
        let ph = phase_latencies(&sp, &p, &part, 4, m).unwrap();
        prop_assert_eq!(t.makespan_us, ph.total_us());
    }
}

#[test]
fn single_stage_with_real_link_matches_phase_model() {
    let sp = spec(5, Technique::ParallelAdapters);
    for devices in [1, 2, 4] {
        let p = profiles(&sp, devices, 0.0, 0, None);
        let part = partition(&[5], &[devices]);
        for m in [1, 3, 6] {
            let t = simulate_partition(&sp, &p, &part, 4, m).unwrap();
            assert_eq!(t.makespan_us, phase_latencies(&sp, &p, &part, 4, m).unwrap().total_us());
        }
    }
}

#[test]
fn two_by_two_six_micro_batch_golden() {
    let sp = spec(4, Technique::Adapters);
    let p = profiles(&sp, 4, 0.0, 0, None);
    let t = simulate_partition(&sp, &p, &partition(&[2, 2], &[2, 2]), 4, 6).unwrap();
    let got: String = (0..4).map(|d| format!("{}: {}\n", t.device_ids[d], t.cell_labels(d).join(" "))).collect();
    let golden = include_str!("../fixtures/golden/two-by-two-m6.txt");
    assert_eq!(got, golden);
    let svg = render_svg(&t);
    assert_eq!(svg.matches(r#"class="lane""#).count(), 4);
    for d in 0..4 {
        let fwd: Vec<_> = t.events.iter().filter(|e| e.device == d && e.kind == EventKind::FwdCell).collect();
        assert_eq!(fwd.len(), 6);
    }
    assert_eq!(svg.matches(r#"<rect class="FwdCell""#).count(), 24);
}

#[test]
fn trace_round_trips_and_empty_trace_is_valid() {
    let sp = spec(4, Technique::ParallelAdapters);
    let p = profiles(&sp, 3, 0.2, 1, None);
    let t = simulate_partition(&sp, &p, &partition(&[1, 3], &[1, 2]), 4, 3).unwrap();
    let back = trace_from_json(&trace_to_json(&t)).unwrap();
    assert_eq!(back.events, t.events);
    let empty = ScheduleTrace::empty(vec!["a".into()]);
    let text = trace_to_json(&empty);
    assert!(trace_from_json(&text).unwrap().events.is_empty());
}
