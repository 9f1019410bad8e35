use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn nap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"
[data]
train_seeds = [0, 10]
test_seeds = [100, 110]

[train]
horizon = 4
epoch_cap = 30
"#;

fn run_ok(args: &[&str]) {
    let out = nap(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_both_splits_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        run_ok(&[
            "gen-data",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ]);
    }
    for file in ["train.jsonl", "test.jsonl"] {
        let text = fs::read_to_string(a.join(file)).unwrap();
        assert_eq!(
            text.lines().count(),
            11,
            "{file}: header plus 10 trajectories"
        );
        assert_eq!(text, fs::read_to_string(b.join(file)).unwrap());
    }
    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["train_levels"], 10);
    assert_eq!(manifest["test_levels"], 10);
    assert_eq!(manifest["format_version"], 1);
    assert_eq!(
        fs::read(a.join("manifest.json")).unwrap(),
        fs::read(b.join("manifest.json")).unwrap()
    );
}

#[test]
fn unknown_config_key_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[train]\nlearning_rat = 0.1\n");
    let out = nap(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn unsolvable_levels_exit_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[env]\nmax_episode_steps = 1\nmax_draws = 5\n[data]\ntrain_seeds = [0, 2]\ntest_seeds = [10, 12]\n",
    );
    let out = nap(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed 0"));
}

#[test]
fn train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let cfg = cfg.to_str().unwrap();
    let data = tmp.path().join("data");
    run_ok(&["gen-data", "--config", cfg, "--out", data.to_str().unwrap()]);
    let train_file = data.join("train.jsonl");

    let (t1, t2) = (tmp.path().join("t1"), tmp.path().join("t2"));
    for dir in [&t1, &t2] {
        run_ok(&[
            "train",
            "--config",
            cfg,
            "--data",
            train_file.to_str().unwrap(),
            "--method",
            "both",
            "--out",
            dir.to_str().unwrap(),
        ]);
    }
    for file in [
        "nap_checkpoint.json",
        "bc_checkpoint.json",
        "nap_train_report.csv",
        "bc_train_report.json",
    ] {
        assert_eq!(
            fs::read(t1.join(file)).unwrap(),
            fs::read(t2.join(file)).unwrap(),
            "{file}"
        );
    }
    let summary = json(&t1.join("nap_train_report.json"));
    assert_eq!(
        summary["epochs_run"].as_u64().unwrap() as usize,
        summary["report"]["epochs"].as_array().unwrap().len()
    );

    let ckpt = t1.join("nap_checkpoint.json");
    let (e1, e2) = (tmp.path().join("e1"), tmp.path().join("e2"));
    for dir in [&e1, &e2] {
        run_ok(&[
            "eval",
            "--config",
            cfg,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ]);
    }
    assert_eq!(
        fs::read(e1.join("eval.json")).unwrap(),
        fs::read(e2.join("eval.json")).unwrap()
    );
    let report = json(&e1.join("eval.json"));
    assert_eq!(report["num_levels"], 10);
    let hist: u64 = report["lengths"]["histogram"]
        .as_object()
        .unwrap()
        .values()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(hist, 10);

    let star = tmp.path().join("star");
    run_ok(&[
        "eval",
        "--config",
        cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--nap-star",
        "--out",
        star.to_str().unwrap(),
    ]);
    assert_eq!(
        json(&star.join("eval.json"))["config"]["eval"]["nap_star"],
        true
    );

    // Evaluating on the training seeds is refused.
    let out = nap(&[
        "eval",
        "--config",
        cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--seeds",
        "5:15",
        "--out",
        tmp.path().join("bad").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bc_flag_trains_only_the_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("bc");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--method",
        "bc",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(out.join("bc_checkpoint.json").exists());
    assert!(!out.join("nap_checkpoint.json").exists());
}

#[test]
fn one_level_training_reaches_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[data]\ntrain_seeds = [0, 1]\n[train]\nhorizon = 4\n",
    );
    let out = tmp.path().join("one");
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let summary = json(&out.join("nap_train_report.json"));
    assert_eq!(summary["stop_reason"], "zero_training_error");
    assert_eq!(summary["final_train_success"], 1.0);
}

#[test]
fn oracle_eval_solves_every_level() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("oracle");
    run_ok(&[
        "eval",
        "--oracle",
        "--seeds",
        "0:50",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(json(&out.join("eval.json"))["success_rate"], 1.0);
}

#[test]
fn broken_checkpoint_exits_with_code_5() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("ckpt.json");
    fs::write(&ckpt, "{\"format_version\": 1}").unwrap();
    let out = nap(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(5));
    let missing = nap(&[
        "inspect",
        "--checkpoint",
        tmp.path().join("nope.json").to_str().unwrap(),
        "--level-seed",
        "1",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(missing.status.code(), Some(5));
}

fn grid(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn inspect_oracle_dumps_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&[
        "inspect",
        "--oracle",
        "--level-seed",
        "3",
        "--t",
        "1",
        "--out",
        a.to_str().unwrap(),
    ]);
    run_ok(&[
        "inspect",
        "--oracle",
        "--level-seed",
        "4",
        "--t",
        "1",
        "--out",
        b.to_str().unwrap(),
    ]);
    assert_eq!(
        fs::read(a.join("costs_predicted.csv")).unwrap(),
        fs::read(a.join("costs_truth.csv")).unwrap()
    );
    let plan = grid(&a.join("plan.csv"));
    let steps = plan
        .iter()
        .map(|r| r[0].clone())
        .collect::<std::collections::BTreeSet<_>>();
    for s in &steps {
        let active: usize = plan
            .iter()
            .filter(|r| &r[0] == s)
            .map(|r| r[2..].iter().filter(|v| v.as_str() == "1").count())
            .sum();
        assert_eq!(active, 1, "step {s}");
    }
    assert_ne!(
        fs::read(a.join("costs_truth.csv")).unwrap(),
        fs::read(b.join("costs_truth.csv")).unwrap()
    );
}

#[test]
fn horizon_sweep_has_one_row_per_horizon_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[data]\ntrain_seeds = [0, 3]\n[eval]\nseeds = [100, 110]\n[train]\nepoch_cap = 5\n[sweep]\nkind = \"horizon\"\nhorizons = [1, 3, 5, 10]\n",
    );
    let out = tmp.path().join("sweep");
    let args = [
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    run_ok(&args);
    let table = fs::read_to_string(out.join("sweep_horizon.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);

    // A resumed run reuses every stored cell unchanged.
    let cells: Vec<_> = fs::read_dir(out.join("cells"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(cells.len(), 4);
    let stamps: Vec<_> = cells
        .iter()
        .map(|p| fs::metadata(p).unwrap().modified().unwrap())
        .collect();
    run_ok(&args);
    let again: Vec<_> = cells
        .iter()
        .map(|p| fs::metadata(p).unwrap().modified().unwrap())
        .collect();
    assert_eq!(stamps, again);
    assert_eq!(
        fs::read_to_string(out.join("sweep_horizon.csv")).unwrap(),
        table
    );
}

#[test]
fn level_sweep_has_restart_and_mean_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[data]\ntrain_seeds = [0, 3]\n[eval]\nseeds = [100, 105]\n[train]\nepoch_cap = 3\nhorizon = 3\n[sweep]\nlevel_counts = [1, 2]\n",
    );
    let out = tmp.path().join("levels");
    run_ok(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let table = fs::read_to_string(out.join("sweep_levels.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 2 * 4);
    assert_eq!(rows.iter().filter(|r| r.contains(",mean,")).count(), 4);
}
