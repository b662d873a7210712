//! End-to-end checks of the command-line interface: exit codes, artifact
//! layout, and the gen-data → train → eval → inspect-retrieval loop on a
//! tiny world. Everything runs the real binary via `CARGO_BIN_EXE_artnet`.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use artnet::harness::{RunConfig, METRICS_HEADER};
use artnet::world::load_episodes;

fn artnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_artnet"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("artnet-cli-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("scratch dir");
    dir
}

/// Tiny data file plus a config sized to train in seconds.
fn tiny_setup(dir: &Path, episodes: &str) -> RunConfig {
    let data = dir.join("episodes.jsonl");
    let out = artnet(&[
        "gen-data", "--verbs", "4", "--nouns", "6", "--contexts", "3", "--dvis", "8",
        "--episodes", episodes, "--seed", "5", "--out", data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "gen-data failed: {}", String::from_utf8_lossy(&out.stderr));
    let mut cfg = RunConfig::default();
    cfg.data = data;
    cfg.out_dir = dir.join("runs");
    cfg.epochs = 2;
    cfg.encoder.layers = 1;
    cfg.encoder.hidden = 16;
    cfg.encoder.heads = 2;
    cfg.encoder.ff_mult = 2;
    cfg.retrieval.pool_size = 20;
    cfg.retrieval.k = 2;
    cfg.reasoning.scorer_hidden = 8;
    cfg
}

#[test]
fn usage_problems_exit_one_and_help_exits_zero() {
    assert_eq!(code(&artnet(&["--definitely-not-a-flag"])), 1);
    assert_eq!(code(&artnet(&["train"])), 1, "train without data is a usage error");
    assert_eq!(code(&artnet(&["gen-data", "--density", "1.5", "--out", "/tmp/x.jsonl"])), 1);
    assert_eq!(code(&artnet(&["--help"])), 0);
    assert_eq!(code(&artnet(&["train", "--help"])), 0);
}

#[test]
fn runtime_problems_exit_two() {
    let dir = scratch("runtime");
    let missing = dir.join("nope.jsonl");
    let out = artnet(&[
        "train", "--data", missing.to_str().unwrap(),
        "--out-dir", dir.join("runs").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let out = artnet(&["eval", "--run-dir", dir.join("no-such-run").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let out = artnet(&["inspect-retrieval", "--run-dir", dir.join("no-such-run").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gen_data_is_deterministic_and_loadable() {
    let dir = scratch("gendata");
    let (a, b) = (dir.join("a.jsonl"), dir.join("b.jsonl"));
    for path in [&a, &b] {
        let out = artnet(&[
            "gen-data", "--verbs", "3", "--nouns", "5", "--episodes", "60",
            "--seed", "9", "--out", path.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
    }
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        "same seed, same bytes"
    );
    let (vocab, d_vis, episodes) = load_episodes(&a).expect("generated file parses");
    assert_eq!(vocab.num_verbs(), 3);
    assert_eq!(vocab.num_nouns(), 5);
    assert_eq!(episodes.len(), 60);
    assert!(d_vis > 0);
    assert!(episodes.iter().all(|e| e.regions.iter().all(|r| r.len() == d_vis)));
}

#[test]
fn train_eval_inspect_loop_produces_consistent_artifacts() {
    let dir = scratch("loop");
    let cfg = tiny_setup(&dir, "120");
    let cfg_path = dir.join("run.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()).unwrap();

    let out = artnet(&["train", "--config", cfg_path.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let run_dir = dir.join("runs").join("artnet-s3-f100");
    for artifact in ["config.toml", "checkpoint.json", "metrics.csv", "retrieval.jsonl"] {
        assert!(run_dir.join(artifact).exists(), "{artifact} missing");
    }

    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(METRICS_HEADER), "metrics header mismatch");
    let eval_rows: Vec<&str> = metrics
        .lines()
        .filter(|l| l.contains("test_seen") || l.contains("test_new"))
        .collect();
    assert_eq!(eval_rows.len(), 2, "one eval row per test split");

    // Re-running eval from the archived run reproduces the same numbers.
    let out = artnet(&["eval", "--run-dir", run_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(run_dir.join("eval-report.csv")).unwrap();
    assert!(report.starts_with(METRICS_HEADER));
    for row in &eval_rows {
        assert!(report.contains(row), "eval row {row:?} not reproduced");
    }

    let out = artnet(&["inspect-retrieval", "--run-dir", run_dir.to_str().unwrap(), "--limit", "2"]);
    assert_eq!(code(&out), 0);
    let shown = String::from_utf8_lossy(&out.stdout);
    assert!(shown.contains("target"), "inspect output names targets: {shown}");

    // Same config and seed in a fresh directory: identical metrics bytes.
    let dir2 = scratch("loop-repeat");
    let mut cfg2 = cfg;
    cfg2.out_dir = dir2.join("runs");
    let cfg2_path = dir2.join("run.toml");
    std::fs::write(&cfg2_path, cfg2.to_toml_string()).unwrap();
    let out = artnet(&["train", "--config", cfg2_path.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(code(&out), 0);
    let metrics2 =
        std::fs::read_to_string(dir2.join("runs").join("artnet-s3-f100").join("metrics.csv"))
            .unwrap();
    assert_eq!(metrics, metrics2, "training is not deterministic");
}

#[test]
fn sweep_emits_one_run_per_fraction() {
    let dir = scratch("sweep");
    let cfg = tiny_setup(&dir, "100");
    let cfg_path = dir.join("sweep.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()).unwrap();

    let out = artnet(&["sweep", "--config", cfg_path.to_str().unwrap(), "--seed", "2"]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let mut runs: Vec<String> = std::fs::read_dir(dir.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    runs.sort();
    assert_eq!(
        runs,
        vec![
            "artnet-s2-f020",
            "artnet-s2-f040",
            "artnet-s2-f060",
            "artnet-s2-f080",
            "artnet-s2-f100",
        ],
        "exactly one run directory per fraction"
    );
}
