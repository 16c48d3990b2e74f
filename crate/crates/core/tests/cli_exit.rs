use std::io::Write;
use std::process::Command;

fn epochal(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_epochal")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn passing_runs_exit_zero() {
    let (code, out, _) = epochal(&["lattice-table", "--trials", "1000"]);
    assert_eq!(code, 0);
    assert!(out.contains("0.905"));
    let (code, out, _) = epochal(&["--format", "csv", "straddle", "--grid", "5"]);
    assert_eq!(code, 0);
    assert!(out.starts_with("# epochal straddle seed=1\nt_c,class,vector,trace_hash\n"));
    assert_eq!(epochal(&["adamw-skew", "--beta1", "0"]).0, 0);
    assert_eq!(epochal(&["bilateral-vs-naive", "--runs", "200", "--adversarial-every", "4"]).0, 0);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(epochal(&["straddle", "--n", "1"]).0, 2);
    assert_eq!(epochal(&["lattice-table", "--q", "1.5", "--n", "3"]).0, 2);
    assert_eq!(epochal(&["no-such-command"]).0, 2);
    assert_eq!(epochal(&["adamw-skew", "--beta1", "1"]).0, 2);
    assert_eq!(epochal(&["--config", "/nonexistent/epochal.json", "retry"]).0, 2);
}

#[test]
fn config_file_feeds_subcommand() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    write!(f, r#"{{"seed": 5, "format": "json", "straddle": {{"grid": 4, "n": 3}}}}"#).unwrap();
    let (code, out, _) = epochal(&["--config", f.path().to_str().unwrap(), "straddle"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["seed"], 5);
    assert_eq!(v["grid"], 4);
    assert_eq!(v["n"], 3);
    assert_eq!(v["check"], "pass");
}

#[test]
fn help_lists_exit_codes() {
    let (code, out, _) = epochal(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("14"));
}
