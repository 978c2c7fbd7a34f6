use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn amfir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amfir"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = amfir(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Small benchmark with a trained model, shared by most tests.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--out", "data.jsonl", "--classes", "20", "--per-class", "12", "--dim-rgb", "16", "--dim-flow", "12"]);
    ok(d, &["split", "--data", "data.jsonl", "--train-out", "train.jsonl", "--test-out", "test.jsonl"]);
    ok(d, &["train", "--data", "train.jsonl", "--model", "model.jsonl", "--episodes", "50", "--proj-dim", "8"]);
    dir
}

#[test]
fn generate_reports_and_writes_records() {
    let dir = tempfile::tempdir().unwrap();
    let s = ok(dir.path(), &["generate", "--out", "d.jsonl", "--classes", "3", "--per-class", "4"]);
    assert!(s.contains("12 records"), "{s}");
    let lines = fs::read_to_string(dir.path().join("d.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 13);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        &["generate", "--out", "x.jsonl", "--sigma-low", "2", "--sigma-high", "1"][..],
        &["generate"],
        &["train", "--data", "x.jsonl"],
        &["eval", "--data", "x.jsonl", "--model", "m.jsonl", "--lambda", "-1"],
        &["generate", "--out", "x.jsonl", "--fusion", "median"],
    ] {
        assert_eq!(amfir(d, args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = workspace();
    let d = dir.path();
    let missing = amfir(d, &["eval", "--data", "test.jsonl", "--model", "absent.jsonl"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.jsonl"));

    ok(d, &["generate", "--out", "other.jsonl", "--classes", "6", "--per-class", "12", "--dim-rgb", "5"]);
    let mismatch = amfir(d, &["eval", "--data", "other.jsonl", "--model", "model.jsonl"]);
    assert_eq!(mismatch.status.code(), Some(1));

    fs::write(d.join("bad.jsonl"), "{\"kind\":\"meta\"}\nnot json\n").unwrap();
    assert_eq!(amfir(d, &["eval", "--data", "bad.jsonl", "--model", "model.jsonl"]).status.code(), Some(1));
}

#[test]
fn too_few_classes_is_a_config_error() {
    let dir = workspace();
    let out = amfir(dir.path(), &["eval", "--data", "test.jsonl", "--model", "model.jsonl", "--n-way", "9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_outputs_model_trace_and_summary() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["train", "--data", "train.jsonl", "--model", "m.jsonl", "--episodes", "30", "--proj-dim", "8",
        "--trace", "t.tsv", "--metrics", "s.json"]);
    let trace = fs::read_to_string(d.join("t.tsv")).unwrap();
    assert_eq!(trace.lines().count(), 30);
    assert!(trace.lines().all(|l| l.split('\t').count() == 8));
    let s = json(&d.join("s.json"));
    assert_eq!(s["kind"], "train_summary");
    assert_eq!(s["episodes"], 30);
    assert_eq!(s["config"]["proj_dim"], 8);
}

#[test]
fn zero_episodes_keeps_the_initial_model() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["train", "--data", "train.jsonl", "--model", "a.jsonl", "--episodes", "0", "--seed", "4"]);
    ok(d, &["train", "--data", "train.jsonl", "--model", "b.jsonl", "--episodes", "1", "--seed", "4"]);
    ok(d, &["train", "--data", "train.jsonl", "--model", "c.jsonl", "--episodes", "0", "--seed", "4", "--lr", "0.5"]);
    let read = |n: &str| fs::read(d.join(n)).unwrap();
    assert_ne!(read("a.jsonl"), read("b.jsonl"));
    // Only the hyperparameter line differs when no step is taken.
    let heads = |n: &str| String::from_utf8(read(n)).unwrap().lines().skip(1).map(String::from).collect::<Vec<_>>();
    assert_eq!(heads("a.jsonl"), heads("c.jsonl"));
}

#[test]
fn eval_metrics_layout() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["eval", "--data", "test.jsonl", "--model", "model.jsonl", "--episodes", "20", "--metrics", "m.json"]);
    let m = json(&d.join("m.json"));
    assert_eq!(m["kind"], "metrics");
    assert_eq!(m["episodes"], 20);
    assert_eq!(m["episode_accuracies"].as_array().unwrap().len(), 20);
    let acc = m["mean_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(m["asi_agreement"].as_f64().is_some());
    for pair in m["group_counts"].as_array().unwrap() {
        assert_eq!(pair[0].as_u64().unwrap() + pair[1].as_u64().unwrap(), 25);
    }
}

#[test]
fn fusion_modes_share_the_episode_stream() {
    let dir = workspace();
    let d = dir.path();
    let mut rgb = Vec::new();
    for (i, fusion) in ["adaptive", "rgb-only", "flow-only", "mean"].iter().enumerate() {
        let name = format!("m{i}.json");
        ok(d, &["eval", "--data", "test.jsonl", "--model", "model.jsonl", "--episodes", "30", "--fusion", fusion,
            "--metrics", &name]);
        let m = json(&d.join(&name));
        rgb.push((m["mean_accuracy_rgb"].clone(), m["mean_accuracy_flow"].clone(), m["group_counts"].clone()));
        if *fusion == "rgb-only" {
            assert_eq!(m["mean_accuracy"], m["mean_accuracy_rgb"]);
        }
    }
    assert!(rgb.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn forced_grouping_puts_every_query_in_one_group() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["eval", "--data", "test.jsonl", "--model", "model.jsonl", "--episodes", "10", "--asi-force", "force-flow",
        "--metrics", "f.json"]);
    let m = json(&d.join("f.json"));
    for pair in m["group_counts"].as_array().unwrap() {
        assert_eq!((pair[0].as_u64(), pair[1].as_u64()), (Some(0), Some(25)));
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = workspace();
    let d = dir.path();
    let mut runs = Vec::new();
    for _ in 0..2 {
        ok(d, &["eval", "--data", "test.jsonl", "--model", "model.jsonl", "--episodes", "40", "--seed", "9",
            "--metrics", "x.json"]);
        runs.push(fs::read(d.join("x.json")).unwrap());
    }
    assert_eq!(runs[0], runs[1]);
    ok(d, &["eval", "--data", "test.jsonl", "--model", "model.jsonl", "--episodes", "40", "--seed", "10",
        "--metrics", "z.json"]);
    assert_ne!(json(&d.join("x.json"))["episode_accuracies"], json(&d.join("z.json"))["episode_accuracies"]);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = workspace();
    let d = dir.path();
    fs::write(d.join("run.cfg"), "# eval settings\nepisodes = 7\nn-way = 3\n").unwrap();
    ok(d, &["eval", "--config", "run.cfg", "--data", "test.jsonl", "--model", "model.jsonl", "--metrics", "a.json"]);
    ok(d, &["eval", "--config", "run.cfg", "--data", "test.jsonl", "--model", "model.jsonl", "--episodes", "4",
        "--metrics", "b.json"]);
    let (a, b) = (json(&d.join("a.json")), json(&d.join("b.json")));
    assert_eq!(a["episodes"], 7);
    assert_eq!(a["group_counts"][0][0].as_u64().unwrap() + a["group_counts"][0][1].as_u64().unwrap(), 15);
    assert_eq!(b["episodes"], 4);
}

#[test]
fn ablate_writes_one_line_per_cell() {
    let dir = workspace();
    let d = dir.path();
    let table = ok(d, &["ablate", "--data", "train.jsonl", "--eval-data", "test.jsonl", "--out", "ab.jsonl",
        "--episodes", "10", "--eval-episodes", "5", "--seeds", "0,1", "--proj-dim", "8"]);
    let lines: Vec<Value> = fs::read_to_string(d.join("ab.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0]["kind"], "ablation");
    let names: Vec<&str> = lines[1..].iter().map(|l| l["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "force_rgb", "force_flow", "amd_off", "ami_off", "t_rgb", "t_flow"]);
    for l in &lines[1..] {
        assert_eq!(l["per_seed"].as_array().unwrap().len(), 2);
    }
    assert_eq!(lines[2]["per_seed"][0]["flow_dominant_total"], 0);
    assert!(table.lines().count() == 8 && table.contains("amd_off"));
}
