use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use metametric::checkpoint::{load_sidecar, Checkpoint};
use metametric::config::Config;
use metametric::data::load_tasks;
use metametric::experiment;
use metametric::training::validate;

const SMALL: &str = r#"
seed = 9

[train]
iterations = 60
val_interval = 20

[retrieval.train]
iterations = 50

[baseline]
iterations = 100

[eval]
episodes = 5
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("config.toml");
    if !config.exists() {
        fs::write(&config, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_metametric"))
        .args(args)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir.join("out"))
        .arg("--quiet")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_writes_twelve_tasks_and_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(dir.path(), &["gen"]));
    let data = dir.path().join("out/data");
    let first = read_dir_sorted(&data);
    assert_eq!(first.iter().filter(|(n, _)| n.ends_with(".jsonl")).count(), 12);
    assert!(first.iter().any(|(n, _)| n == "manifest.json"));
    ok(run(dir.path(), &["gen"]));
    assert_eq!(read_dir_sorted(&data), first);
    let header = String::from_utf8(first[1].1.clone()).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.contains("\"version\":1") && header.contains("\"config_hash\"") && header.contains("\"seed\":9"));
}

#[test]
fn invalid_ratios_exit_with_status_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.toml"), "[split]\nratios = [0.6, 0.2, 0.3]\n").unwrap();
    let out = run(dir.path(), &["gen"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sum to 1"));
}

#[test]
fn unknown_key_exits_with_status_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    assert_eq!(run(dir.path(), &["gen"]).status.code(), Some(2));
}

#[test]
fn missing_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["train"]).status.code(), Some(3));
}

#[test]
fn full_pipeline_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(dir.path(), &["run-experiment"]));
    let out = dir.path().join("out");
    let cfg = Config::from_toml(SMALL).unwrap().resolved().unwrap();

    // retrieval: one row per candidate, exactly s selected
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("retrieval.json")).unwrap()).unwrap();
    let targets = report["targets"].as_array().unwrap();
    assert_eq!(targets.len(), 12);
    for t in targets {
        assert_eq!(t["scores"].as_array().unwrap().len(), 11);
        assert_eq!(t["selected"].as_array().unwrap().len(), cfg.retrieval.s);
    }

    // metrics: one line per meta-iteration, each with provenance
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), cfg.train.iterations);
    let last: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    assert_eq!(last["config_hash"], cfg.hash());
    assert!(last["meta_val_acc"].is_number());

    // results: one row per (task, k, method)
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(lines.next().unwrap(), experiment::RESULTS_HEADER);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 12 * cfg.eval.shots.len() * 3);
    for r in &rows {
        let acc: f64 = r[3].parse().unwrap();
        let std: f64 = r[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc) && std >= 0.0);
    }

    // the stored meta-validation accuracy is reproduced from the checkpoint
    let ckpt = out.join("checkpoint.mml");
    let loaded = Checkpoint::load(&ckpt).unwrap();
    let sidecar = load_sidecar(&ckpt).unwrap();
    let tasks = load_tasks(&out.join("data")).unwrap();
    let split = experiment::split(&cfg, &tasks).unwrap();
    let acc = validate(&loaded.meta, &cfg.net(), &split.meta_val, &cfg.train, cfg.seed).unwrap();
    assert_eq!(Some(acc), sidecar.best_val_acc);

    // resuming continues from the stored Θ
    ok(run(dir.path(), &["train", "--resume", ckpt.to_str().unwrap()]));
}

#[test]
fn identical_runs_give_identical_checkpoints() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        ok(run(dir, &["gen"]));
        ok(run(dir, &["train"]));
    }
    let read = |d: &Path| fs::read(d.join("out/checkpoint.mml")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(run(dir.path(), &["gen", "--seed", "4"]));
    let manifest = fs::read_to_string(dir.path().join("out/data/manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 4"));
}
