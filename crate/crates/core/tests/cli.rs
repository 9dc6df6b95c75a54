use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn teamlearn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teamlearn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, config: &Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, config.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config() -> Value {
    json!({
        "dataset": {"synthetic": {"n": 600, "seed": 1}},
        "train": {"iterations": 120, "calibration_interval": 50},
        "costs": [0.0, 0.1],
        "lambdas": [1.0],
        "seeds": [0],
    })
}

#[test]
fn generate_writes_default_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = teamlearn(&["-q", "generate", "--out", "data"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("n=14000 K=5 d=8 human_error_rate="));
    let csv = fs::read_to_string(dir.path().join("data/dataset.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("f0,f1,f2,f3,f4,f5,f6,f7,y,h"));
    assert_eq!(lines.count(), 14000);
}

#[test]
fn generate_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &json!({"dataset": {"synthetic": {"n": 300}}}));
    let read = |name: &str, seed: &str| {
        let out = teamlearn(
            &[
                "-q", "generate", "--config", &config, "--seed", seed, "--out", name,
            ],
            dir.path(),
        );
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        fs::read(dir.path().join(name).join("dataset.csv")).unwrap()
    };
    assert_eq!(read("a", "4"), read("b", "4"));
    assert_ne!(read("a", "4"), read("c", "5"));
}

#[test]
fn invalid_generator_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &json!({"dataset": {"synthetic": {"n": 0}}}));
    let out = teamlearn(&["-q", "generate", "--config", &config], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!stderr(&out).is_empty());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &json!({"cost_grid": [0.1]}));
    let out = teamlearn(&["-q", "sweep", "--config", &config], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_approach_list_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config();
    config["approaches"] = json!([]);
    let config = write_config(dir.path(), &config);
    let out = teamlearn(&["-q", "sweep", "--config", &config], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(teamlearn(&["train"], dir.path()).status.code(), Some(2));
}

#[test]
fn human_only_sweep_with_perfect_human_costs_exactly_c() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("f0,f1,y,h\n");
    for i in 0..60 {
        let y = i % 3;
        csv.push_str(&format!("{},{},{y},{y}\n", i as f64 * 0.1, (i % 7) as f64));
    }
    fs::write(dir.path().join("perfect.csv"), csv).unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "dataset": {"csv": {"path": "perfect.csv", "num_classes": 3}},
            "approaches": ["human-only"],
            "seeds": [0, 1],
            "formats": ["json", "csv"],
        }),
    );
    let out = teamlearn(
        &[
            "-q", "sweep", "--config", &config, "--costs", "0.1", "--out", "out",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let results: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/sweep.json")).unwrap())
            .unwrap();
    let record = &results[0]["records"][0];
    assert_eq!(results[0]["approach"], "human-only");
    assert!((record["total_loss"].as_f64().unwrap() - 0.1).abs() < 1e-12);
    assert_eq!(record["query_rate"].as_f64(), Some(1.0));
    assert_eq!(record["classification_error"].as_f64(), Some(0.0));
    let rows = fs::read_to_string(dir.path().join("out/sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
}

#[test]
fn sweep_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let out = teamlearn(
        &["-q", "sweep", "--config", &config, "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let run = dir.path().join("run");
    for file in [
        "sweep.json",
        "sweep.csv",
        "loss_vs_cost.svg",
        "summary.json",
    ] {
        assert!(run.join(file).exists(), "{file}");
    }
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2);
    assert_eq!(summary[0]["t_test_pairing"], "per-seed, pooled over costs");
    assert!(run.join("models/joint-voi__seed0.json").exists());

    let out = teamlearn(
        &["-q", "analyze", "--config", &config, "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let tables: Value =
        serde_json::from_str(&fs::read_to_string(run.join("per_class.json")).unwrap()).unwrap();
    assert_eq!(tables.as_array().unwrap().len(), 4);
    assert!(run.join("error_tree.json").exists());
}

#[test]
fn analyze_without_saved_models_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let out = teamlearn(
        &["-q", "analyze", "--config", &config, "--out", "nothing"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("fixed-disc__seed0.json"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn verify_passes_and_detects_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let out = teamlearn(&["verify"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}{}",
        stdout(&out),
        stderr(&out)
    );
    let text = stdout(&out);
    for suite in [
        "gradcheck",
        "voi-oracle",
        "soft-limit",
        "runtime-rule",
        "calibration",
    ] {
        assert!(
            text.contains(&format!("{suite}: ")),
            "{suite} missing from {text}"
        );
    }

    let out = teamlearn(&["verify", "--inject-gradient-fault"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("gradcheck: ") && stdout(&out).contains("FAILED"));
    assert!(stderr(&out).contains("gradcheck"));
}
