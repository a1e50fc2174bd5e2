use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(rel)
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adapterpipe")).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn toy_model(dir: &Path) -> String {
    let p = dir.join("toy.json");
    std::fs::copy(fixture("models/toy.json"), &p).unwrap();
    "toy.json".into()
}

#[test]
fn bundled_cluster_plan_uses_two_groups_of_four() {
    let dir = tempfile::tempdir().unwrap();
    let profiles = fixture("profiles/bart-large-x2-8dev.json");
    ok(
        dir.path(),
        &[
            "plan",
            "--model",
            "bart-large-x2",
            "--profiles",
            profiles.to_str().unwrap(),
            "-B",
            "8",
            "-M",
            "4",
            "--out",
            "plan.json",
        ],
    );
    let plan = json(&dir.path().join("plan.json"));
    let stages = plan["plan"]["partition"]["stages"].as_array().unwrap();
    let sizes: Vec<usize> = stages.iter().map(|s| s["devices"].as_array().unwrap().len()).collect();
    assert_eq!(sizes, [4, 4]);
    assert_eq!(plan["schema_version"], 1);
    assert!(dir.path().join("plan.manifest.json").is_file());
}

#[test]
fn all_oom_budgets_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "plan",
            "--model",
            "t5-base",
            "--synth",
            "n=2,het=0,seed=0,mem_gib=0.001",
            "-B",
            "2",
            "-M",
            "2",
            "--out",
            "p.json",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no feasible plan"));
    assert!(!dir.path().join("p.json").exists());
}

#[test]
fn oracle_cross_check() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let synth = "n=3,het=0.5,seed=7,seq=8,mb=4,gflops=0.01";
    let stdout = ok(
        dir.path(),
        &["plan", "--model", &model, "--synth", synth, "-B", "2", "-M", "3", "--out", "p.json", "--oracle"],
    );
    assert!(stdout.contains("oracle: agrees"), "{stdout}");
    let too_big = run_in(
        dir.path(),
        &[
            "plan",
            "--model",
            "t5-base",
            "--synth",
            "n=2,het=0,seed=0",
            "-B",
            "2",
            "-M",
            "2",
            "--out",
            "q.json",
            "--oracle",
        ],
    );
    assert_eq!(too_big.status.code(), Some(2));
}

#[test]
fn invalid_inputs_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let bad_synth = run_in(
        dir.path(),
        &["plan", "--model", "t5-base", "--synth", "n=2,het=0", "-B", "2", "-M", "2", "--out", "p.json"],
    );
    assert_eq!(bad_synth.status.code(), Some(2));
    let unknown = run_in(
        dir.path(),
        &["plan", "--model", "no-such-model", "--synth", "n=2,het=0,seed=1", "-B", "2", "-M", "2", "--out", "p.json"],
    );
    assert_eq!(unknown.status.code(), Some(2));
    let missing =
        run_in(dir.path(), &["simulate", "--plan", "absent.json", "--synth", "n=2,het=0,seed=1", "--trace", "t.json"]);
    assert_eq!(missing.status.code(), Some(5));
    let flags = run_in(dir.path(), &["plan", "--model", "t5-base"]);
    assert_eq!(flags.status.code(), Some(2));
}

#[test]
fn cached_simulation_needs_a_populated_cache() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    let synth = "n=2,het=0,seed=1,seq=8,mb=4,gflops=0.01";
    ok(dir.path(), &["plan", "--model", &model, "--synth", synth, "-B", "2", "-M", "2", "--out", "plan.json"]);
    let out = run_in(
        dir.path(),
        &[
            "simulate",
            "--plan",
            "plan.json",
            "--synth",
            synth,
            "--cached",
            "--samples",
            "8",
            "--cache-dir",
            "nowhere",
            "--trace",
            "t.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
    let no_dir = run_in(
        dir.path(),
        &["simulate", "--plan", "plan.json", "--synth", synth, "--cached", "--samples", "8", "--trace", "t.json"],
    );
    assert_eq!(no_dir.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&no_dir.stderr).contains("populated cache"));
}

#[test]
fn profile_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    ok(
        dir.path(),
        &[
            "plan",
            "--model",
            &model,
            "--synth",
            "n=2,het=0,seed=1,seq=8,mb=4",
            "-B",
            "2",
            "-M",
            "2",
            "--out",
            "plan.json",
        ],
    );
    let out = run_in(
        dir.path(),
        &["simulate", "--plan", "plan.json", "--synth", "n=3,het=0,seed=1,seq=8,mb=4", "--trace", "t.json"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn replay_reproduces_and_detects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    ok(
        dir.path(),
        &[
            "profile-synth",
            "--model",
            &model,
            "--synth",
            "n=4,het=0.3,seed=5,seq=8,mb=4,gflops=0.01",
            "--out",
            "p.json",
        ],
    );
    ok(dir.path(), &["plan", "--model", &model, "--profiles", "p.json", "-B", "4", "-M", "6", "--out", "plan.json"]);
    ok(dir.path(), &["simulate", "--plan", "plan.json", "--profiles", "p.json", "--trace", "t.json", "--svg", "t.svg"]);
    for m in ["p.manifest.json", "plan.manifest.json", "t.manifest.json"] {
        let stdout = ok(dir.path(), &["replay", m]);
        assert!(stdout.contains("byte-identical"), "{stdout}");
    }
    let manifest = json(&dir.path().join("t.manifest.json"));
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["subcommand"], "simulate");
    assert!(manifest["inputs"].as_array().unwrap().iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));

    let mut p = json(&dir.path().join("p.json"));
    p["link"]["latency_ms"] = Value::from(5.0);
    std::fs::write(dir.path().join("p.json"), serde_json::to_string_pretty(&p).unwrap()).unwrap();
    let out = run_in(dir.path(), &["replay", "t.manifest.json"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn manifest_location_can_be_chosen() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "profile-synth",
            "--model",
            "t5-base",
            "--synth",
            "n=2,het=0,seed=0",
            "--out",
            "p.json",
            "--manifest",
            "m/run.json",
        ],
    );
    let m = json(&dir.path().join("m/run.json"));
    assert!(!m["argv"].as_array().unwrap().iter().any(|a| a.as_str().unwrap().contains("manifest")));
    ok(dir.path(), &["replay", "m/run.json"]);
}

#[test]
fn toy_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = toy_model(d);
    let synth = "n=2,het=0,seed=3,seq=8,mb=4,gflops=0.01";
    ok(d, &["profile-synth", "--model", &model, "--synth", synth, "--out", "p.json"]);
    ok(d, &["plan", "--model", &model, "--profiles", "p.json", "-B", "2", "-M", "2", "--out", "plan.json"]);
    let tune = ok(
        d,
        &[
            "tune-toy",
            "--spec",
            &model,
            "--samples",
            "12",
            "--epochs",
            "3",
            "--cache",
            "--cache-dir",
            "cache",
            "--keep-cache",
            "--seed",
            "9",
            "--report",
            "tune.json",
        ],
    );
    assert!(tune.contains("parameters bitwise equal: true"), "{tune}");
    let t = json(&d.join("tune.json"));
    assert_eq!(t["equivalence"]["passed"], true);
    assert_eq!(t["epochs"].as_array().unwrap().len(), 3);
    assert_eq!(t["epochs"][1]["census"]["backbone_fwd_flops"], 0);
    assert_eq!(t["epochs"][2]["census"]["backbone_bwd_flops"], 0);
    assert_eq!(t["cache"]["payload_bytes"], t["cache"]["formula_bytes"]);
    assert!(d.join("cache/records.bin").is_file());

    let sim = ok(
        d,
        &[
            "simulate",
            "--plan",
            "plan.json",
            "--profiles",
            "p.json",
            "--cached",
            "--samples",
            "12",
            "--cache-dir",
            "cache",
            "--trace",
            "c.json",
            "--svg",
            "c.svg",
            "--summary",
            "s.json",
        ],
    );
    assert!(sim.contains("reduction"), "{sim}");
    let s = json(&d.join("s.json"));
    let record = json(&d.join("cache/header.json"))["record_bytes"].clone();
    assert_eq!(s["bytes_per_sample"], record);

    let rep = ok(
        d,
        &[
            "report",
            "--plan",
            "plan.json",
            "--trace",
            "c.json",
            "--tune",
            "tune.json",
            "--cache-dir",
            "cache",
            "--out",
            "report.json",
        ],
    );
    assert!(rep.contains("integrity: ok"), "{rep}");
    let r = json(&d.join("report.json"));
    assert_eq!(r["cache"]["integrity"]["valid"], 12);
    assert_eq!(r["tune"]["equivalence_passed"], true);
    assert_eq!(r["cost_model"]["rows"].as_array().unwrap().len(), 5);
    for chart in ["report-gantt.svg", "report-flops.svg", "report-memory.svg"] {
        assert!(std::fs::read_to_string(d.join(chart)).unwrap().starts_with("<svg"), "{chart}");
    }

    for m in ["tune.manifest.json", "c.manifest.json", "report.manifest.json"] {
        ok(d, &["replay", m]);
    }
    let header_before = std::fs::read(d.join("cache/header.json")).unwrap();
    ok(d, &["replay", "tune.manifest.json"]);
    assert_eq!(std::fs::read(d.join("cache/header.json")).unwrap(), header_before);
}

#[test]
fn tune_toy_without_keep_cache_cleans_up() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model(dir.path());
    ok(
        dir.path(),
        &[
            "tune-toy",
            "--spec",
            &model,
            "--samples",
            "4",
            "--epochs",
            "2",
            "--cache",
            "--seed",
            "1",
            "--report",
            "r.json",
        ],
    );
    assert!(!dir.path().join("r.cache").exists());
    let r = json(&dir.path().join("r.json"));
    assert_eq!(r["equivalence"]["passed"], true);
}

#[test]
fn bundled_cluster_report_names_the_grouping() {
    let dir = tempfile::tempdir().unwrap();
    let profiles = fixture("profiles/bart-large-x2-8dev.json");
    let p = profiles.to_str().unwrap();
    ok(dir.path(), &["plan", "--model", "bart-large-x2", "--profiles", p, "-B", "8", "-M", "4", "--out", "plan.json"]);
    ok(dir.path(), &["simulate", "--plan", "plan.json", "--profiles", p, "--trace", "t.json"]);
    ok(dir.path(), &["report", "--plan", "plan.json", "--trace", "t.json", "--out", "r.json"]);
    let r = json(&dir.path().join("r.json"));
    assert_eq!(r["plan"]["group_sizes"], serde_json::json!([4, 4]));
    assert_eq!(r["plan"]["model"], "bart-large-x2");
}
