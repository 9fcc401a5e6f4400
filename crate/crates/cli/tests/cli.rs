use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn jumpsmp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jumpsmp")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const DUALITY: &str = r#"
kind = "duality"
seed = 5
paths = 4000
noise.kind = "compensated_poisson"
noise.intensities = [2.0]
target.kind = "terminal_count"
"#;

#[test]
fn passing_run_writes_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "run.toml", DUALITY);
    let out = dir.path().join("out");
    let o = jumpsmp(&[
        "duality",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("overall: PASS"));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], true);
    assert_eq!(summary["config"]["seed"], 5);
    assert!(fs::read_to_string(out.join("report.txt"))
        .unwrap()
        .contains("duality paired gap"));
    assert!(out.join("artifacts/duality.csv").exists());
}

#[test]
fn overrides_apply_and_ensemble_is_exported() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "run.toml", &format!("{DUALITY}output.ensemble = true\n"));
    let out = dir.path().join("out");
    let o = jumpsmp(&[
        "duality",
        "--config",
        &config,
        "--seed",
        "9",
        "--paths",
        "1500",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["seed"], 9);
    assert_eq!(summary["config"]["paths"], 1500);
    assert!(out.join("ensembles/main.bin").exists());
}

#[test]
fn failing_check_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    // A repeated level cannot lower the residual variance.
    let config = write(
        dir.path(),
        "run.toml",
        r#"
kind = "representation"
seed = 1
paths = 2000
dissecting.levels = [2, 2]
noise.kind = "brownian"
target.kind = "terminal_noise_squared"
"#,
    );
    let out = dir.path().join("out");
    let o = jumpsmp(&["representation", "--config", &config, "--out", out.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(1),
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["pass"], false);
}

#[test]
fn configuration_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write(dir.path(), "unknown.toml", &format!("{DUALITY}foo = 3\n"));
    let o = jumpsmp(&["duality", "--config", &unknown]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("foo"));

    let o = jumpsmp(&["optimize", "--config", &write(dir.path(), "run.toml", DUALITY)]);
    assert_eq!(o.status.code(), Some(2));

    let o = jumpsmp(&["duality"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    let o = jumpsmp(&["duality", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
