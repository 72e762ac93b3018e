use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cointel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cointel")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn tiny_simulation_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = cointel(&["simulate", "--n-paths", "2", "--horizon-days", "5", "--seed", "3", "--out", &out_arg(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let got = fs::read_to_string(dir.path().join("paths.csv")).unwrap();
    let want = include_str!("fixtures/simulate_tiny.csv");
    assert_eq!(got, want);
}

#[test]
fn invalid_parameters_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = cointel(&["simulate", "--kappa", "1.5", "--out", &out_arg(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("kappa"));
    assert_eq!(code(&cointel(&["simulate", "--n-paths", "many"])), 2);
    assert_eq!(code(&cointel(&["experiment", "--no-train", "--out", &out_arg(dir.path())])), 2);
    assert_eq!(code(&cointel(&["simulate", "--strategies", "MVC,XYZ"])), 2);
}

#[test]
fn numerical_fault_exits_with_3() {
    // mu + kappa = 0 makes the closed-form moments singular.
    let dir = tempfile::tempdir().unwrap();
    let o = cointel(&["mvc", "--mu=-0.1", "--kappa", "0.1", "--out", &out_arg(dir.path())]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn io_failure_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = cointel(&["simulate", "--n-paths", "1", "--horizon-days", "3", "--out", &out_arg(&blocker.join("sub"))]);
    assert_eq!(code(&o), 4);
    let o = cointel(&["simulate", "--config", &out_arg(&dir.path().join("missing.toml"))]);
    assert_eq!(code(&o), 4);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("from-file");
    fs::write(
        &cfg,
        format!(
            "out = {:?}\n[experiment]\nn_paths = 3\nhorizon_days = 4\nseed = 11\n[experiment.params]\nkappa = 0.3\n",
            out_arg(&out)
        ),
    )
    .unwrap();
    assert_eq!(code(&cointel(&["simulate", "--config", &out_arg(&cfg)])), 0);
    let text = fs::read_to_string(out.join("paths.csv")).unwrap();
    assert!(text.starts_with("# root_seed=11\n"));
    assert_eq!(text.lines().count(), 2 + 3 * 5);

    assert_eq!(code(&cointel(&["simulate", "--config", &out_arg(&cfg), "--seed", "12", "--n-paths", "1"])), 0);
    let text = fs::read_to_string(out.join("paths.csv")).unwrap();
    assert!(text.starts_with("# root_seed=12\n"));
    assert_eq!(text.lines().count(), 2 + 5);

    fs::write(&cfg, "[experiment]\nn_pathz = 3\n").unwrap();
    assert_eq!(code(&cointel(&["simulate", "--config", &out_arg(&cfg)])), 2);
}

#[test]
fn backtest_and_band_training_write_headed_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = out_arg(dir.path());
    let common = ["--horizon-days", "60", "--seed", "4", "--out", d.as_str()];
    for strategy in ["mvc", "ml", "ml-ls", "fixed"] {
        let mut args = vec!["backtest", "--strategy", strategy];
        args.extend(common);
        assert_eq!(code(&cointel(&args)), 0);
        let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        let mut lines = trace.lines();
        assert_eq!(lines.next(), Some("# root_seed=4"));
        assert_eq!(lines.next(), Some("step,time,w1,w2,V,pnl,label"));
        assert_eq!(lines.count(), 61);
    }
    let mut args = vec!["bandml-train", "--bands", "3"];
    args.extend(common);
    assert_eq!(code(&cointel(&args)), 0);
    let table = fs::read_to_string(dir.path().join("strategy_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 2 + 3);
}

#[test]
fn experiment_runs_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = out_arg(dir.path());
    let tiny = ["--hidden", "3", "--layers", "1", "--steps", "50", "--horizon-days", "40", "--out", d.as_str()];
    let mut args = vec!["dgm-train"];
    args.extend(tiny);
    assert_eq!(code(&cointel(&args)), 0);
    let ckpt = dir.path().join("checkpoint.txt");
    assert!(ckpt.exists());
    let ck = out_arg(&ckpt);
    let o = cointel(&["experiment", "--checkpoint", &ck, "--no-train", "--n-paths", "4", "--horizon-days", "40", "--out", &d]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    for label in ["MVC", "SC", "ML_LS", "ML", "FM"] {
        assert!(summary.lines().any(|l| l.starts_with(&format!("{label},"))), "{label}");
    }
}
