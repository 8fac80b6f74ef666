//! End-to-end runs of the binary on small configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const POSITIVE: &str = r#"
seed = 1

[subequation]
name = "trace"

[family]
name = "block-quadratic"
b = [[1.0, 0.0], [0.0, 1.0]]
c = [[1.0], [0.0]]
d = [[1.0]]

[domain]
base = 1.0

[grid]
per_axis = 6
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn run(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semiconvex")).args(args).arg(config).output().unwrap()
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn positive_control_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", POSITIVE);
    let out = run(&["minprin"], &cfg);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = report(dir.path());
    assert_eq!(r["passed"], true);
    assert_eq!(r["summary"]["violations"], 0);
    assert!(r["summary"]["stable"].as_u64().unwrap() > 0);
    let csv = std::fs::read_to_string(dir.path().join("points.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 36);
}

#[test]
fn negative_control_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let body = POSITIVE.replace("b = [[1.0, 0.0], [0.0, 1.0]]", "b = [[0.1, 0.0], [0.0, 0.1]]");
    let cfg = write_config(dir.path(), "c.toml", &body);
    let out = run(&["minprin"], &cfg);
    assert_eq!(out.status.code(), Some(1));
    let r = report(dir.path());
    assert_eq!(r["passed"], false);
    let failed: Vec<&str> = r["assertions"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|a| a["passed"] == false)
        .map(|a| a["name"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"max_violation_rate"), "{failed:?}");
}

#[test]
fn bad_config_exits_two_with_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &format!("{POSITIVE}\nunknown_key = 3\n"));
    let out = run(&["minprin"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(report(dir.path())["error"]["kind"], "config");

    let cfg = write_config(dir.path(), "d.toml", &POSITIVE.replace("\"trace\"", "\"no-such-thing\""));
    assert_eq!(run(&["minprin"], &cfg).status.code(), Some(2));
    assert_eq!(run(&["minprin"], &dir.path().join("missing.toml")).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"], &cfg).status.code(), Some(2));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", POSITIVE);
    let read = |name: &str| std::fs::read(dir.path().join(name)).unwrap();
    run(&["minprin"], &cfg);
    let (r1, p1) = (read("report.json"), read("points.csv"));
    run(&["minprin"], &cfg);
    assert_eq!(r1, read("report.json"));
    assert_eq!(p1, read("points.csv"));
}

#[test]
fn output_paths_resolve_against_the_config_directory() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{POSITIVE}\n[output]\nreport = \"nested/r.json\"\npoints = \"nested/p.csv\"\n");
    let cfg = write_config(dir.path(), "c.toml", &body);
    assert_eq!(run(&["minprin"], &cfg).status.code(), Some(0));
    assert!(dir.path().join("nested/r.json").is_file());
    assert!(dir.path().join("nested/p.csv").is_file());
}

#[test]
fn every_subcommand_runs_on_a_smooth_family() {
    let body = r#"
seed = 3

[subequation]
name = "trace"

[family]
name = "coupled-quadratic"
sigma = 1.0

[domain]
base = 2.0

[grid]
per_axis = 5

[prox]
sigmas = [1.0]
pairs = 50

[supconv]
epsilons = [0.5]
points = 10

[check_sub]
samples = 5
positivity_trials = 20
"#;
    for sub in ["prox", "argmin", "supconv", "check-sub"] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), "c.toml", body);
        let out = run(&[sub], &cfg);
        assert_eq!(out.status.code(), Some(0), "{sub}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(report(dir.path())["command"], sub);
    }
}
