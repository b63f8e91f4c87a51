//! End-to-end smoke tests for the command-line interface: tiny budgets,
//! every subcommand, exit-code categories.

use std::path::Path;
use std::process::Command;

fn hyperdt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hyperdt"))
}

fn run_ok(args: &[&str]) -> String {
    let out = hyperdt().args(args).output().expect("spawn hyperdt");
    assert!(
        out.status.success(),
        "command {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf8 path")
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let pre = dir.path().join("pretrain");
    let hyper = dir.path().join("hypernet");
    let adapt = dir.path().join("adapt");
    let eval = dir.path().join("eval");
    let proj = dir.path().join("proj.csv");

    let out = run_ok(&[
        "gen-data",
        "--out-dir",
        path_str(&data),
        "--seed",
        "1",
        "--tasks",
        "0,1,50",
        "--episodes-per-task",
        "3",
    ]);
    assert!(out.contains("expert successes 3/3"), "{out}");

    run_ok(&[
        "pretrain",
        "--data-dir",
        path_str(&data),
        "--out-dir",
        path_str(&pre),
        "--seed",
        "1",
        "--tasks",
        "0,1",
        "--iterations",
        "6",
        "--batch",
        "2",
        "--d-x",
        "16",
        "--blocks",
        "1",
        "--heads",
        "2",
        "--k",
        "4",
        "--svg",
    ]);
    let dt = pre.join("dt.ckpt");
    assert!(dt.exists());
    assert!(pre.join("loss.csv").exists());
    assert!(pre.join("loss.svg").exists());
    assert!(pre.join("config_echo.json").exists());

    run_ok(&[
        "train-hypernet",
        "--data-dir",
        path_str(&data),
        "--dt",
        path_str(&dt),
        "--out-dir",
        path_str(&hyper),
        "--seed",
        "1",
        "--tasks",
        "0,1",
        "--iterations",
        "4",
        "--batch",
        "2",
        "--d-h",
        "4",
        "--d-e",
        "8",
        "--d-z",
        "8",
    ]);
    let hyper_ckpt = hyper.join("hypernet.ckpt");
    assert!(hyper_ckpt.exists());

    let out = run_ok(&[
        "adapt",
        "--mode",
        "hdt",
        "--setting",
        "lfo",
        "--task",
        "50",
        "--dt",
        path_str(&dt),
        "--hypernet",
        path_str(&hyper_ckpt),
        "--data-dir",
        path_str(&data),
        "--out-dir",
        path_str(&adapt),
        "--seed",
        "2",
        "--rollout-budget",
        "2",
        "--batch",
        "2",
        "--eval-episodes",
        "2",
    ]);
    assert!(out.contains("mode=hdt"), "{out}");
    assert!(adapt.join("adapted.ckpt").exists());
    assert!(adapt.join("rollout_log.json").exists());
    assert!(adapt.join("metrics.json").exists());

    let out = run_ok(&[
        "eval",
        "--adapted",
        path_str(&adapt.join("adapted.ckpt")),
        "--tasks",
        "50",
        "--episodes",
        "2",
        "--seed",
        "3",
        "--out-dir",
        path_str(&eval),
    ]);
    assert!(out.contains("mean success rate"), "{out}");

    let out = run_ok(&[
        "export-proj",
        "--hypernet",
        path_str(&hyper_ckpt),
        "--tasks",
        "0,1",
        "--samples-per-task",
        "2",
        "--out",
        path_str(&proj),
        "--seed",
        "4",
    ]);
    assert!(out.contains("projected 4 adapter vectors"), "{out}");
    let text = std::fs::read_to_string(&proj).unwrap();
    assert!(text.starts_with("# explained_variance"));
}

#[test]
fn expert_eval_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(&[
        "eval",
        "--expert",
        "--tasks",
        "0,50",
        "--episodes",
        "2",
        "--seed",
        "0",
        "--out-dir",
        path_str(&dir.path().join("eval")),
    ]);
    assert!(out.contains("mean success rate 1.000"), "{out}");
}

#[test]
fn grad_check_subcommand_passes() {
    let out = run_ok(&["grad-check", "--step", "1e-5"]);
    assert!(out.contains("all checked primitives within"), "{out}");
}

#[test]
fn config_error_exit_code() {
    let out = hyperdt()
        .args(["eval", "--tasks", "0"])
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(2), "missing policy should be a config error");

    let out = hyperdt()
        .args(["adapt", "--mode", "warp", "--setting", "lfo"])
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_error_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("missing.ckpt");
    let out = hyperdt()
        .args(["eval", "--dt", path_str(&bogus), "--tasks", "0"])
        .output()
        .expect("spawn");
    assert_eq!(out.status.code(), Some(3), "missing checkpoint is a data error");
}

#[test]
fn rerun_from_config_echo_reproduces_gen_data() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&[
        "gen-data",
        "--out-dir",
        path_str(&a),
        "--seed",
        "7",
        "--tasks",
        "0",
        "--episodes-per-task",
        "2",
    ]);
    // Re-run from the echo into a different directory.
    run_ok(&[
        "gen-data",
        "--config",
        path_str(&a.join("config_echo.json")),
        "--out-dir",
        path_str(&b),
    ]);
    let file_a = std::fs::read(a.join("task_000/ep_0001.traj")).unwrap();
    let file_b = std::fs::read(b.join("task_000/ep_0001.traj")).unwrap();
    assert_eq!(file_a, file_b);
}
