use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const CONFIG: &str = r#"{
  "models": {
    "vocab_size": 32,
    "markov_order": 1,
    "target_seed": 9,
    "noise_sigma": 0.5,
    "concentration": 0.3,
    "draft_temp": 0.6,
    "target_temp": 0.0
  },
  "generation": { "prefix_len": 16, "gen_len": 24, "budget": 16, "seed": 5 }
}"#;

fn setup() -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, CONFIG).unwrap();
    (dir, cfg)
}

fn dyspec(cfg: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dyspec"));
    if let Some(cfg) = cfg {
        cmd.arg("--config").arg(cfg);
    }
    cmd.args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn generate_json_and_csv() {
    let (_dir, cfg) = setup();
    let json = dyspec(Some(&cfg), &["generate", "--format", "json"]);
    assert_eq!(json.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(v["tokens"].as_array().unwrap().len(), 24);

    let csv = dyspec(Some(&cfg), &["generate", "--format", "csv"]);
    assert_eq!(csv.status.code(), Some(0));
    assert!(stdout(&csv).starts_with("step,"));
}

#[test]
fn seed_flag_changes_output() {
    let (_dir, cfg) = setup();
    let a = dyspec(Some(&cfg), &["generate", "--seed", "1"]);
    let b = dyspec(Some(&cfg), &["generate", "--seed", "2"]);
    let c = dyspec(Some(&cfg), &["generate", "--seed", "1"]);
    assert_eq!(a.stdout, c.stdout);
    assert_ne!(a.stdout, b.stdout);
}

#[test]
fn thread_cap_does_not_change_results() {
    let (_dir, cfg) = setup();
    let args = [
        "bench",
        "--budgets",
        "8,16",
        "--seeds",
        "3",
        "--format",
        "csv",
    ];
    let wide = dyspec(Some(&cfg), &args);
    let narrow = Command::new(env!("CARGO_BIN_EXE_dyspec"))
        .env("DYSPEC_THREADS", "1")
        .arg("--config")
        .arg(&cfg)
        .args(args)
        .output()
        .unwrap();
    assert_eq!(wide.status.code(), Some(0));
    assert_eq!(wide.stdout, narrow.stdout);
    let text = stdout(&wide);
    assert!(text.starts_with(
        "structure,budget,threshold,size_cap,target_temp,seeds,mean_accepted,mean_tree_size,modeled_latency\n"
    ));
    // 4 structures x 2 budgets x 2 temps
    assert_eq!(text.lines().count(), 1 + 16);
}

#[test]
fn mask_csv_is_byte_stable() {
    let args = [
        "mask", "--n", "64,128", "--prefix", "0,32", "--seeds", "3", "--format", "csv",
    ];
    let a = dyspec(None, &args);
    let b = dyspec(None, &args);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert_eq!(text.lines().next(), Some("n,prefix,block,order,count"));
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 3);
}

#[test]
fn chain_mask_counts_match_across_orders() {
    let out = dyspec(
        None,
        &[
            "mask", "--n", "64", "--tree", "chain", "--seeds", "1", "--format", "csv",
        ],
    );
    let text = stdout(&out);
    let counts: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap())
        .collect();
    assert_eq!(counts, ["3", "3", "3"]);
}

#[test]
fn hypothesis_rows_per_bin() {
    let (_dir, cfg) = setup();
    let out = dyspec(
        Some(&cfg),
        &[
            "hypothesis",
            "--runs",
            "4",
            "--bins",
            "5",
            "--format",
            "csv",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert_eq!(text.lines().next(), Some("bin_lo,bin_hi,acc_rate,count"));
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn oracle_suite_passes_with_exit_zero() {
    let out = dyspec(
        None,
        &[
            "oracle",
            "optimality",
            "--instances",
            "50",
            "--format",
            "csv",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert_eq!(
        text.lines().next(),
        Some("case,expected,observed,tolerance,pass")
    );
    assert_eq!(text.lines().count(), 51);
}

#[test]
fn out_dir_receives_files() {
    let (dir, cfg) = setup();
    let out = dir.path().join("res");
    let status = dyspec(Some(&cfg), &["generate", "--out", out.to_str().unwrap()]).status;
    assert_eq!(status.code(), Some(0));
    assert!(out.join("metrics.json").is_file());
    assert!(out.join("steps.csv").is_file());
}

#[test]
fn usage_errors_exit_two() {
    let (dir, cfg) = setup();
    assert_eq!(dyspec(None, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(dyspec(None, &["generate"]).status.code(), Some(2));
    assert_eq!(
        dyspec(Some(&cfg), &["generate", "--budget", "0"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        dyspec(Some(&cfg), &["generate", "--format", "xml"])
            .status
            .code(),
        Some(2)
    );
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"models": {"vocab_size": 4}, "extra": 1}"#).unwrap();
    assert_eq!(dyspec(Some(&bad), &["generate"]).status.code(), Some(2));
    assert_eq!(dyspec(None, &["--help"]).status.code(), Some(0));
}
