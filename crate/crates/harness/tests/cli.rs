use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn simulate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simulate"))
        .args(args)
        .output()
        .unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn writes_json_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("echo.json");
    let config = configs().join("echo.toml");
    let run = simulate(&[
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
        "--seed",
        "9",
        "--duration-ms",
        "3",
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["seed"], 9);
    assert_eq!(report["config"]["duration_ms"], 3.0);
    assert_eq!(report["scenario"], "echo");
    assert_eq!(report["points"].as_array().unwrap().len(), 1);
}

#[test]
fn writes_csv_and_honours_the_ablation_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("iso.csv");
    let config = configs().join("isolation_connections.toml");
    let run = simulate(&[
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
        "--format",
        "csv",
        "--ablate-no-budget",
        "--duration-ms",
        "2",
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("scenario,seed,point,label,guest,"));
    // Solo has one guest; each of the five sweep points has two.
    assert_eq!(lines.count(), 1 + 5 * 2);
}

#[test]
fn scenario_override_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let config = configs().join("echo.toml");
    let run = simulate(&[
        "--config",
        path_str(&config),
        "--out",
        path_str(&dir.path().join("x.json")),
        "--scenario",
        "isolation",
    ]);
    assert_eq!(run.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&run.stderr).contains("`guests`"));
}

#[test]
fn bad_configs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.json");
    for (name, text) in [
        ("syntax.toml", "duration_ms = ["),
        ("unknown.toml", "durations_ms = 5\n[[guests]]\n"),
        ("invalid.toml", "[[guests]]\nweight = 0\n"),
    ] {
        let config = dir.path().join(name);
        std::fs::write(&config, text).unwrap();
        let run = simulate(&["--config", path_str(&config), "--out", path_str(&out)]);
        assert_eq!(
            run.status.code(),
            Some(2),
            "{name}: {}",
            String::from_utf8_lossy(&run.stderr)
        );
    }
    assert!(!out.exists());
}

#[test]
fn unwritable_output_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = configs().join("echo.toml");
    let out = dir.path().join("missing").join("x.json");
    let run = simulate(&[
        "--config",
        path_str(&config),
        "--out",
        path_str(&out),
        "--duration-ms",
        "1",
    ]);
    assert_eq!(run.status.code(), Some(1));
}

#[test]
fn missing_config_file_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let run = simulate(&[
        "--config",
        path_str(&dir.path().join("nope.toml")),
        "--out",
        path_str(&dir.path().join("x.json")),
    ]);
    assert_eq!(run.status.code(), Some(1));
}
