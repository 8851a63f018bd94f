use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn marshal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marshal")).args(args).output().expect("binary runs")
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let events = dir.path().join("events.ndjson");
    let o = marshal(&[
        "run", "--layout", "small", "--controller", "isolated", "--demand", "6", "--seed", "3", "--window-hours", "1",
        "--reps", "2", "--out", out, "--events", events.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 3);
    let runs = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert!(runs.starts_with("size,demand,controller,rep,seed,status,arrivals,exits,throughput,failure_time"));
    assert_eq!(runs.lines().count(), 3);
    assert!(runs.lines().nth(2).unwrap().contains(",1,4,"), "rep 1 uses seed + 1");
    assert!(dir.path().join("summary.csv").exists());
    assert!(std::fs::read_to_string(events).unwrap().lines().all(|l| l.starts_with('{')));
}

#[test]
fn matrix_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = repo_file("configs/quick.toml");
    let o = marshal(&["matrix", "--config", config.to_str().unwrap(), "--reps", "1", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = std::fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 3);
    assert!(stdout(&o).contains("mean paired delta"));
    assert!(!dir.path().join("runs.partial.csv").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "replication = 3\n").unwrap();
    let o = marshal(&["matrix", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("replication"));

    std::fs::write(&bad, "[sim]\nwindow = -1.0\n").unwrap();
    let o = marshal(&["matrix", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = marshal(&["run", "--layout", "nowhere.map", "--controller", "isolated", "--demand", "1", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));

    let o = marshal(&["run", "--layout", "small", "--controller", "sideways", "--demand", "1", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2), "clap usage errors also exit with 2");
}

#[test]
fn validate_reports_problems() {
    for name in ["small", "medium", "large"] {
        let o = marshal(&["validate", "--layout", repo_file(&format!("crates/core/layouts/{name}.map")).to_str().unwrap()]);
        assert!(o.status.success(), "{name}: {}", stdout(&o));
    }
    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.map");
    // the exit is walled off
    std::fs::write(&broken, "CIWLP#\nciwlp#\nE...##\n####.X\n").unwrap();
    let o = marshal(&["validate", "--layout", broken.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("broken.map"));

    std::fs::write(&broken, "CIWLP\nciwlp\nE...?\n").unwrap();
    let o = marshal(&["validate", "--layout", broken.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn oracle_scenario_matches() {
    let o = marshal(&["oracle", "--scenario", repo_file("scenarios/oracle_small.toml").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("pathing: match"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("s.toml");
    std::fs::write(&bad, "layout = \"E\"\ncolour = 1\n").unwrap();
    assert_eq!(marshal(&["oracle", "--scenario", bad.to_str().unwrap()]).status.code(), Some(2));
}
