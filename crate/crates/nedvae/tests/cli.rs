//! End-to-end CLI behavior: reproducibility, exit codes, and the file
//! outputs every subcommand promises.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_nedvae")
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("nedvae_cli_{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .env_remove("NED_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run_in(dir, args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_run_config(dir: &Path) {
    std::fs::write(
        dir.join("run.toml"),
        r#"
seed = 5

[dataset]
path = "er.jsonl"

[objective]
variant = "NED-VAE"
beta = 1.0

[train]
iterations = 6
batch_size = 12
eval_every = 3
"#,
    )
    .unwrap();
}

#[test]
fn gen_writes_meta_plus_one_line_per_record() {
    let dir = tmpdir("gen");
    ok(
        &dir,
        &[
            "gen", "--family", "er", "--n", "10", "--samples", "25", "--seed", "7", "--out",
            "er.jsonl",
        ],
    );
    let text = std::fs::read_to_string(dir.join("er.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 26);
    assert!(text.starts_with("{\"meta\""));
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let dir = tmpdir("gen_det");
    let args = [
        "gen", "--family", "ws", "--n", "12", "--samples", "10", "--seed", "3", "--out",
    ];
    ok(&dir, &[&args[..], &["a.jsonl"]].concat());
    ok(&dir, &[&args[..], &["b.jsonl"]].concat());
    let a = std::fs::read(dir.join("a.jsonl")).unwrap();
    let b = std::fs::read(dir.join("b.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_family_is_a_usage_error() {
    let dir = tmpdir("usage");
    let out = run_in(&dir, &["gen", "--n", "10", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_variant_exits_with_data_error_listing_names() {
    let dir = tmpdir("variant");
    ok(
        &dir,
        &[
            "gen", "--family", "er", "--n", "8", "--samples", "16", "--seed", "1", "--out",
            "er.jsonl",
        ],
    );
    write_run_config(&dir);
    let out = run_in(
        &dir,
        &["train", "--config", "run.toml", "--variant", "NED-WHAT", "--out", "run1"],
    );
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("NED-VAE") && stderr.contains("GDVAE-baseline"));
}

#[test]
fn train_eval_traverse_report_pipeline() {
    let dir = tmpdir("pipeline");
    ok(
        &dir,
        &[
            "gen", "--family", "er", "--n", "8", "--samples", "30", "--seed", "1", "--out",
            "er.jsonl",
        ],
    );
    write_run_config(&dir);
    ok(&dir, &["train", "--config", "run.toml", "--out", "run1"]);
    for file in ["run.toml", "checkpoint.ned", "train_log.jsonl"] {
        assert!(dir.join("run1").join(file).exists(), "missing run1/{file}");
    }
    // training log lines parse and follow eval_every
    let log = std::fs::read_to_string(dir.join("run1/train_log.jsonl")).unwrap();
    let iters: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["iteration"].as_u64().unwrap())
        .collect();
    assert_eq!(iters, vec![3, 6]);

    ok(
        &dir,
        &[
            "eval",
            "--checkpoint",
            "run1/checkpoint.ned",
            "--dataset",
            "er.jsonl",
            "--seed",
            "3",
            "--trials",
            "60",
            "--test-trials",
            "30",
            "--out",
            "report.json",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    for field in ["beta_m", "factor_m", "dci", "modularity"] {
        assert!(report[field].is_number(), "report missing {field}");
    }
    let runs = std::fs::read_to_string(dir.join("runs.csv")).unwrap();
    assert!(runs.lines().count() == 2);
    assert!(runs.lines().nth(1).unwrap().starts_with("er,NED-VAE,3,"));

    ok(
        &dir,
        &[
            "traverse",
            "--checkpoint",
            "run1/checkpoint.ned",
            "--out",
            "trav",
            "--group",
            "f",
            "--dim",
            "0",
        ],
    );
    let entries: Vec<String> = std::fs::read_dir(dir.join("trav"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    let dots = entries.iter().filter(|e| e.ends_with(".dot")).count();
    assert_eq!(dots, 11, "default grid emits 11 DOT files for one dim");
    assert!(entries.contains(&"effect_profile.csv".to_string()));
    let profile = std::fs::read_to_string(dir.join("trav/effect_profile.csv")).unwrap();
    assert_eq!(
        profile.lines().count(),
        1 + 9 * 3,
        "profile covers (L1+L2+L3) x 3 correlation cells"
    );

    let out = ok(&dir, &["report", "--runs", "runs.csv"]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("| er | NED-VAE |"));
}

#[test]
fn repeated_runs_are_identical_and_resume_continues() {
    let dir = tmpdir("determinism");
    ok(
        &dir,
        &[
            "gen", "--family", "er", "--n", "8", "--samples", "24", "--seed", "2", "--out",
            "er.jsonl",
        ],
    );
    write_run_config(&dir);
    ok(&dir, &["train", "--config", "run.toml", "--out", "runA"]);
    ok(&dir, &["train", "--config", "run.toml", "--out", "runB"]);
    let a = std::fs::read(dir.join("runA/checkpoint.ned")).unwrap();
    let b = std::fs::read(dir.join("runB/checkpoint.ned")).unwrap();
    assert_eq!(a, b, "same config and seed must give identical checkpoints");

    // resuming continues the iteration counter
    ok(
        &dir,
        &[
            "train",
            "--config",
            "run.toml",
            "--out",
            "runC",
            "--resume",
            "runA/checkpoint.ned",
            "--iterations",
            "4",
        ],
    );
    let cp = nedvae::trainer::load_checkpoint(dir.join("runC/checkpoint.ned")).unwrap();
    assert_eq!(cp.iteration, 10);
}

#[test]
fn ned_seed_env_var_overrides_config_seed() {
    let dir = tmpdir("envseed");
    ok(
        &dir,
        &[
            "gen", "--family", "er", "--n", "8", "--samples", "24", "--seed", "2", "--out",
            "er.jsonl",
        ],
    );
    write_run_config(&dir);
    let out = Command::new(bin())
        .current_dir(&dir)
        .args(["train", "--config", "run.toml", "--out", "runEnv"])
        .env("NED_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("seed 99"), "env seed should win: {stdout}");
    // explicit flag beats the environment
    let out = Command::new(bin())
        .current_dir(&dir)
        .args(["train", "--config", "run.toml", "--out", "runFlag", "--seed", "5"])
        .env("NED_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("seed 5"), "flag should beat env: {stdout}");
}

#[test]
fn truncated_checkpoint_is_a_data_error() {
    let dir = tmpdir("badcp");
    std::fs::write(dir.join("broken.ned"), "{\"version\":1,").unwrap();
    std::fs::write(dir.join("er.jsonl"), "").unwrap();
    let out = run_in(
        &dir,
        &["eval", "--checkpoint", "broken.ned", "--dataset", "er.jsonl"],
    );
    assert_eq!(out.status.code(), Some(3));
}
