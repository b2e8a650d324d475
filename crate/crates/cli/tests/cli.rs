use std::path::{Path, PathBuf};

use symctl::TransitionSystem;
use symctl_cli::run_args;

fn config(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name).to_string_lossy().into_owned()
}

fn run(args: &[&str]) -> symctl_cli::Outcome {
    run_args(std::iter::once("symctl").chain(args.iter().copied()))
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_kind(stderr: &str) -> String {
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).expect("error JSON on stderr");
    v["error"].as_str().unwrap().to_string()
}

#[test]
fn params_reports_slack() {
    let out = run(&["params", "--config", &config("pendulum.json")]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let v: serde_json::Value = serde_json::from_str(&out.stdout).unwrap();
    let slack = v["iss"]["slack"].as_f64().unwrap();
    assert!((slack - 0.00155).abs() < 1e-5, "{slack}");
}

#[test]
fn coarse_state_grid_violates_condition() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("pendulum.json")).unwrap().replace("\"eta\": 0.4", "\"eta\": 0.6");
    let cfg = dir.path().join("coarse.json");
    std::fs::write(&cfg, text).unwrap();
    let out = run(&["abstract", "--config", path(&cfg)]);
    assert_eq!(out.code, 1);
    assert_eq!(error_kind(&out.stderr), "condition_violated");
}

#[test]
fn usage_and_config_errors_exit_two() {
    let out = run(&["abstract"]);
    assert_eq!(out.code, 2);
    assert_eq!(error_kind(&out.stderr), "usage");
    let out = run(&["params", "--config", "/nonexistent/config.json"]);
    assert_eq!(out.code, 2);
    assert_eq!(error_kind(&out.stderr), "config");
    let out = run(&["--threads", "0", "params", "--config", &config("linear.json")]);
    assert_eq!(out.code, 2);
}

#[test]
fn linear_pipeline_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = config("linear.json");

    let out = run(&["abstract", "--config", &cfg, "--out", path(&out_dir), "--dot"]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let ts_path = out_dir.join("abstraction.json");
    let ts = TransitionSystem::from_json(&std::fs::read_to_string(&ts_path).unwrap()).unwrap();
    assert_eq!((ts.num_states(), ts.num_labels()), (13, 21));
    assert!(std::fs::read_to_string(out_dir.join("abstraction.dot")).unwrap().contains("ordinal=13"));

    let out = run(&["verify", "--config", &cfg, "--abstraction", path(&ts_path), "--samples", "20", "--seed", "5"]);
    assert_eq!(out.code, 0, "{}", out.stdout);

    let out = run(&["synth", "--config", &cfg, "--abstraction", path(&ts_path), "--out", path(&out_dir)]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let controller: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("controller.json")).unwrap()).unwrap();
    assert_eq!(controller["legs"].as_array().unwrap().len(), 3);

    let plan = out_dir.join("plan.json");
    let out = run(&[
        "simulate",
        "--config",
        &cfg,
        "--abstraction",
        path(&ts_path),
        "--plan",
        path(&plan),
        "--out",
        path(&out_dir),
    ]);
    assert_eq!(out.code, 0, "{}", out.stdout);
    let csv = std::fs::read_to_string(out_dir.join("trajectory.csv")).unwrap();
    assert!(csv.starts_with("t,x1,u1\n"));
    let tube: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("tube.json")).unwrap()).unwrap();
    assert_eq!(tube["pass"], true);

    let out = run(&["simulate", "--config", &cfg, "--feedback"]);
    assert_eq!(out.code, 0, "{}", out.stdout);
}

#[test]
fn artifacts_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("linear.json");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(run(&["--threads", "2", "synth", "--config", &cfg, "--out", path(d)]).code, 0);
        assert_eq!(run(&["abstract", "--config", &cfg, "--out", path(d)]).code, 0);
    }
    for f in ["abstraction.json", "controller.json", "plan.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bisim_of_a_model_with_itself() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("linear.json");
    assert_eq!(run(&["abstract", "--config", &cfg, "--out", path(dir.path())]).code, 0);
    let ts = dir.path().join("abstraction.json");
    let rel = dir.path().join("relation.json");
    let out = run(&["bisim", path(&ts), path(&ts), "--eps", "0", "--out", path(&rel)]);
    assert_eq!(out.code, 0, "{}", out.stderr);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&rel).unwrap()).unwrap();
    assert!(v["pairs"].as_array().unwrap().len() >= 13);
}

#[test]
fn unstable_system_fails_verification() {
    let cfg = config("unstable.json");
    let out = run(&["verify", "--config", &cfg]);
    assert_eq!(out.code, 2, "no certificate and no --force");
    let out = run(&["verify", "--config", &cfg, "--force"]);
    assert_eq!(out.code, 1);
    let v: serde_json::Value = serde_json::from_str(&out.stdout).unwrap();
    assert_eq!(v["pass"], false);
}

#[test]
fn infeasible_spec_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("linear.json")).unwrap().replace("[[6], [9], [3]]", "[[12]]");
    let cfg = dir.path().join("far.json");
    std::fs::write(&cfg, text).unwrap();
    let out = run(&["synth", "--config", path(&cfg)]);
    assert_eq!(out.code, 1);
    assert_eq!(error_kind(&out.stderr), "infeasible");
}
