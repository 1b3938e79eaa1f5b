use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rte_sim::config::{Experiment, RunConfig};
use rte_sim::run::read_table;
use rte_sim::{run, RunOptions};

const BIN: &str = env!("CARGO_BIN_EXE_rte-sim");

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path
}

fn linear(out: &Path, extra: &str) -> String {
    format!(
        r#"{{"schema": 1, "model": {{"name": "linear-scalar"}},
            "solver": [{{"theta": 0, "quadrature": "euler", "h": [0.5, 0.25]}},
                       {{"theta": 0.5, "quadrature": "trapezoidal", "h": [0.5, 0.25]}}],
            "T": 2, "x0": [10], "M": 8, "output": "{}"{extra}}}"#,
        out.display()
    )
}

fn rte_sim(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("RTE_SIM_SEED");
    if let Some(s) = env_seed {
        cmd.env("RTE_SIM_SEED", s);
    }
    cmd.output().unwrap()
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn outputs_are_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &linear(&tmp.path().join("unused"), ""));
    let mut runs = Vec::new();
    for threads in ["1", "3"] {
        let out = tmp.path().join(format!("t{threads}"));
        let o = rte_sim(
            &["converge", "--config", cfg.to_str().unwrap(), "--threads", threads, "--no-timestamp", "--output", out.to_str().unwrap()],
            None,
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(dir_contents(&out));
    }
    assert_eq!(runs[0], runs[1]);
    assert!(runs[0].contains_key("report.csv") && runs[0].contains_key("fit.txt") && runs[0].contains_key("meta.json"));
}

#[test]
fn seed_precedence_reaches_the_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &linear(tmp.path(), r#", "seed": 5"#));
    let seed_of = |args: &[&str], env: Option<&str>| {
        let out = tmp.path().join("o");
        let mut all = vec!["simulate", "--config", cfg.to_str().unwrap(), "--output", out.to_str().unwrap()];
        all.extend_from_slice(args);
        assert!(rte_sim(&all, env).status.success());
        let meta: serde_json::Value = serde_json::from_slice(&fs::read(out.join("meta.json")).unwrap()).unwrap();
        (meta["seed"].as_u64().unwrap(), meta["seed_source"].as_str().unwrap().to_string())
    };
    assert_eq!(seed_of(&["--seed", "9"], Some("7")), (9, "flag".into()));
    assert_eq!(seed_of(&[], Some("0x7")), (7, "env".into()));
    assert_eq!(seed_of(&[], None), (5, "config".into()));
}

#[test]
fn timestamp_is_the_only_difference() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &linear(tmp.path(), ""));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(rte_sim(&["diagnose", "--config", cfg.to_str().unwrap(), "--output", a.to_str().unwrap()], None).status.success());
    assert!(rte_sim(&["diagnose", "--config", cfg.to_str().unwrap(), "--no-timestamp", "--output", b.to_str().unwrap()], None)
        .status
        .success());
    let (da, db) = (dir_contents(&a), dir_contents(&b));
    assert_eq!(da["diagnose.csv"], db["diagnose.csv"]);
    assert!(String::from_utf8_lossy(&da["meta.json"]).contains("unix_time"));
    assert!(!String::from_utf8_lossy(&db["meta.json"]).contains("unix_time"));
}

#[test]
fn bad_step_size_exits_1_naming_h() {
    let tmp = tempfile::tempdir().unwrap();
    let body = linear(tmp.path(), "").replace("[0.5, 0.25]}]", "[0.5, 0.3]}]");
    let cfg = write_config(tmp.path(), &body);
    let o = rte_sim(&["converge", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("h = 0.3"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(rte_sim(&["converge"], None).status.code(), Some(1));
    assert_eq!(rte_sim(&["converge", "--config", "/nonexistent/rte.json"], None).status.code(), Some(1));
    assert_eq!(rte_sim(&["--help"], None).status.code(), Some(0));
}

#[test]
fn model_failure_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let body = linear(tmp.path(), "").replace("\"x0\": [10]", "\"x0\": [1e307]");
    let cfg = write_config(tmp.path(), &body);
    let o = rte_sim(&["simulate", "--config", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn implicit_non_convergence_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        r#"{{"model": {{"name": "linear-scalar"}},
            "solver": [{{"theta": 1, "quadrature": "euler", "h": [2.5], "fp_max_iter": 3}}],
            "T": 5, "x0": [10], "M": 2, "output": "{}"}}"#,
        tmp.path().display()
    );
    let cfg = write_config(tmp.path(), &body);
    let o = rte_sim(&["converge", "--config", cfg.to_str().unwrap()], None);
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(o.status.code(), Some(3), "{err}");
    assert!(err.contains("replication 0") && err.contains("warning"), "{err}");
}

#[test]
fn simulate_layout_and_coupling() {
    let tmp = tempfile::tempdir().unwrap();
    let config = RunConfig::from_json(&linear(tmp.path(), r#", "sample_grid": 0.25"#)).unwrap();
    let summary = run(&config, Experiment::Simulate, &RunOptions::default()).unwrap();
    for f in [
        "traj_theta0-euler-h0.5.csv",
        "traj_theta0.5-trapezoidal-h0.25.csv",
        "traj_exact.csv",
        "jumps_exact.csv",
        "segments_exact.csv",
        "diagnostics.csv",
        "meta.json",
    ] {
        assert!(summary.files.iter().any(|x| x == f), "missing {f}: {:?}", summary.files);
    }
    let traj = read_table(&tmp.path().join("traj_theta0-euler-h0.5.csv")).unwrap();
    assert_eq!(traj[0], ["t", "x_1", "tau_1"]);
    assert_eq!(traj.len(), 1 + 5);
    assert_eq!(traj[1], ["0", "10", "0"]);
    let exact = read_table(&tmp.path().join("traj_exact.csv")).unwrap();
    assert_eq!(exact.len(), 1 + 9);
    let first = fs::read_to_string(tmp.path().join("jumps_exact.csv")).unwrap();
    assert!(first.starts_with("# rte-sim "));
    assert!(first.contains(&format!("config_sha256={}", summary.config_hash)));
}

#[test]
fn converge_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let config = RunConfig::from_json(&linear(tmp.path(), "")).unwrap();
    run(&config, Experiment::Converge, &RunOptions::default()).unwrap();
    let rep = read_table(&tmp.path().join("report_theta0-euler.csv")).unwrap();
    assert_eq!(rep[0], ["h", "mean_abs_error", "std_error", "M"]);
    assert_eq!(rep[1][0], "0.5");
    assert_eq!(rep[2][3], "8");
    let raw = fs::read_to_string(tmp.path().join("report_theta0-euler.csv")).unwrap();
    assert!(raw.lines().last().unwrap().starts_with("# slope="));
    let fit = fs::read_to_string(tmp.path().join("fit.txt")).unwrap();
    assert_eq!(fit.lines().filter(|l| l.contains("slope=")).count(), 2);
}

#[test]
fn local_error_and_hookless_models() {
    let tmp = tempfile::tempdir().unwrap();
    let config = RunConfig::from_json(&linear(tmp.path(), "")).unwrap();
    run(&config, Experiment::LocalError, &RunOptions::default()).unwrap();
    let t = read_table(&tmp.path().join("local_theta0-euler-h0.25.csv")).unwrap();
    assert_eq!(t[0], ["n", "L_abs", "K_abs"]);
    assert_eq!(t.len(), 1 + 8);

    let phage = RunConfig::from_json(&format!(
        r#"{{"model": {{"name": "bacteriophage-scaled"}},
            "solver": [{{"theta": 0.5, "quadrature": "midpoint", "h": [0.1]}}],
            "T": 1, "x0": [2, 2, 1], "M": 2, "output": "{}"}}"#,
        tmp.path().display()
    ))
    .unwrap();
    let err = run(&phage, Experiment::LocalError, &RunOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    let s = run(&phage, Experiment::Converge, &RunOptions::default()).unwrap();
    assert!(s.findings.iter().any(|f| f.message.contains("exceed")), "{:?}", s.findings);
}
