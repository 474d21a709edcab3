use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shotnoise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shotnoise"))
        .args(args)
        .output()
        .unwrap()
}

fn run(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        sub,
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    shotnoise(&args)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn malformed_json_exits_2_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", "{\"epsilon\": 0.1,");
    let o = run("simulate", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.json"));
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("fluid", &dir.path().join("nope.json"), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_keys_and_wrong_command_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let model = configs().join("unit_poisson.json");
    let extra = write(
        dir.path(),
        "extra.json",
        &format!(r#"{{"model_file": {model:?}, "epsilon": 0.1, "epsilom": 0.2}}"#),
    );
    assert_eq!(
        run("simulate", &extra, &dir.path().join("a"), &[]).status.code(),
        Some(2)
    );
    let wrong = write(
        dir.path(),
        "wrong.json",
        &format!(r#"{{"command": "fluid", "model_file": {model:?}, "epsilon": 0.1}}"#),
    );
    assert_eq!(
        run("simulate", &wrong, &dir.path().join("b"), &[]).status.code(),
        Some(2)
    );
}

#[test]
fn simulate_is_reproducible_and_seed_flag_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("simulate.json");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(run("simulate", &cfg, &a, &[]).status.success());
    assert!(run("simulate", &cfg, &b, &[]).status.success());
    assert!(run("simulate", &cfg, &c, &["--seed", "8"]).status.success());
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "path.csv"), read(&b, "path.csv"));
    assert_eq!(read(&a, "events.csv"), read(&b, "events.csv"));
    assert_ne!(read(&a, "events.csv"), read(&c, "events.csv"));

    let m: serde_json::Value = serde_json::from_slice(&read(&c, "manifest.json")).unwrap();
    assert_eq!(m["seed"], 8);
    assert_eq!(m["seed_source"], "command line");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
    assert!(m["wall_time_secs"].as_f64().unwrap() >= 0.0);
}

#[test]
fn mc_output_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("mc_is.json");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run("mc", &cfg, &a, &["--threads", "1"]).status.success());
    assert!(run("mc", &cfg, &b, &["--threads", "3"]).status.success());
    for f in ["decay.csv", "estimates.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn rate_writes_report_and_tilt() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    assert!(run("rate", &configs().join("rate.json"), &out, &[]).status.success());
    let r: serde_json::Value = serde_json::from_slice(&fs::read(out.join("rate.json")).unwrap()).unwrap();
    let cost = r["cost"].as_f64().unwrap();
    assert!((cost - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-3);
    for key in ["residual", "control", "trace"] {
        assert!(r.get(key).is_some(), "{key}");
    }
    let tilt = fs::read_to_string(out.join("control.json")).unwrap();
    assert!(tilt.contains("time_grid") && tilt.contains("values"));
}

#[test]
fn unreachable_constraint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "rate.json",
        r#"{"model": {"d": 2, "T": 1.0, "atoms": [{"id": "a", "payload": [1.0, 0.0], "weight": 1.0}]},
            "constraint": {"terminal": [1.0, 1.0]}, "max_outer": 8}"#,
    );
    let o = run("rate", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn capped_picard_iterations_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let model = configs().join("affine.json");
    let cfg = write(
        dir.path(),
        "fluid.json",
        &format!(r#"{{"model_file": {model:?}, "tol": 1e-15, "max_iterations": 1}}"#),
    );
    let o = run("fluid", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn verify_missing_benchmark_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "v.json", r#"{"benchmark": "absent.json"}"#);
    assert_eq!(run("verify", &cfg, &dir.path().join("out"), &[]).status.code(), Some(2));
}

#[test]
fn tightened_tolerance_names_the_failing_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let bench = configs().join("unit_poisson.json");
    let cfg = write(
        dir.path(),
        "v.json",
        &format!(r#"{{"benchmark": {bench:?}, "suite": {{"tolerance_scale": 0.01}}, "criteria": ["A2", "A7"]}}"#),
    );
    let out = dir.path().join("out");
    let o = run("verify", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("A2 FAIL"), "{stdout}");
    assert!(stdout.contains("A7 PASS"), "{stdout}");
    assert!(out.join("manifest.json").exists());
    assert!(fs::read_to_string(out.join("verify.txt"))
        .unwrap()
        .contains("failed: A2"));
}
