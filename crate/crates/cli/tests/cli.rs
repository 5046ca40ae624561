use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tunekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tunekit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

const DUBINS_LS: &str = "system = \"dubins\"\nstrategy = \"ls\"\n";

#[test]
fn tune_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DUBINS_LS);
    let out = dir.path().join("run");
    let res = tunekit(&["tune", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let json = fs::read_to_string(out.join("final.json")).unwrap();
    let iterations: usize = json
        .lines()
        .find_map(|l| l.trim().strip_prefix("\"iterations\": "))
        .and_then(|v| v.trim_end_matches(',').parse().ok())
        .unwrap();
    assert_eq!(lines(&out.join("run.csv")), iterations + 1);
    assert_eq!(lines(&out.join("curve.csv")), iterations + 1);
    let header = fs::read_to_string(out.join("run.csv")).unwrap();
    assert!(header.starts_with("iteration,loss,rmse,grad_norm,alpha_or_mu,theta_kp,"));
}

#[test]
fn strategy_flag_overrides_and_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DUBINS_LS);
    let res = tunekit(&["tune", "--config", &cfg, "--strategy", "gd", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("[config]"));
}

#[test]
fn config_errors_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "system = \"dubins\"\nstrategy = \"ls\"\nlearning_rate = 2\n");
    let res = tunekit(&["tune", "--config", &cfg]);
    assert_eq!(res.status.code(), Some(2));

    let missing = dir.path().join("nope.toml");
    let res = tunekit(&["tune", "--config", missing.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(4));
}

#[test]
fn divergent_run_exits_with_divergence_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "system = \"dubins\"\nstrategy = \"gd\"\nalpha = 1e6\n");
    let out = dir.path().join("run");
    let res = tunekit(&["tune", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stdout));
    assert!(fs::read_to_string(out.join("final.json")).unwrap().contains("\"divergence\""));
}

#[test]
fn compare_writes_one_row_per_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), DUBINS_LS);
    let out = dir.path().join("cmp");
    let res = tunekit(&["compare", "--config", &cfg, "--strategies", "ls,bfgs", "--out", out.to_str().unwrap()]);
    assert!(res.status.success());
    assert_eq!(lines(&out.join("comparison.csv")), 3);
    assert!(out.join("ls/run.csv").exists() && out.join("bfgs/run.csv").exists());
}

#[test]
fn montecarlo_writes_gains_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "system = \"quadrotor\"\nstrategy = \"ls\"\nmax_iters = 2\nN = 200\ntrials = 2\nseed = 4\n[noise]\n",
    );
    let out = dir.path().join("mc");
    let res = tunekit(&["montecarlo", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(lines(&out.join("gains.csv")), 13);
    assert_eq!(lines(&out.join("ls/montecarlo_trials.csv")), 1 + 2 * 3);
    assert_eq!(lines(&out.join("ls/montecarlo_failures.csv")), 1);
}

#[test]
fn check_jacobians_passes_for_both_systems() {
    for sys in ["dubins", "quadrotor"] {
        let res = tunekit(&["check-jacobians", "--system", sys, "--samples", "20"]);
        assert!(res.status.success(), "{sys}: {}", String::from_utf8_lossy(&res.stdout));
    }
    let res = tunekit(&["check-jacobians"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        tunekit::TuneConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 5);
}
