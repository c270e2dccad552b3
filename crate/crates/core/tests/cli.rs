use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
        .join("config.toml")
}

fn p2hh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2hh"))
        .args(args)
        .env("P2HH_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn plan(dir: &Path, extra: &[&str]) -> Output {
    let config = fixture("small");
    let mut args = vec!["plan", "-c", config.to_str().unwrap(), "-o", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    p2hh(&args)
}

fn evaluate(dir: &Path, solution: &Path, extra: &[&str]) -> Output {
    let config = fixture("small");
    let mut args = vec![
        "evaluate",
        "-c",
        config.to_str().unwrap(),
        "-o",
        dir.to_str().unwrap(),
        "--solution",
        solution.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    p2hh(&args)
}

#[test]
fn plan_then_evaluate_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = plan(dir.path(), &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let solution = dir.path().join("solution.csv");
    let text = fs::read_to_string(&solution).unwrap();
    assert!(text.starts_with("# p2hh v"));
    assert!(text.contains("# dims days=1 hours=3"));
    let out = evaluate(dir.path(), &solution, &["--samples", "50"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in [
        "evaluation.toml",
        "violation_histogram.csv",
        "kpi.csv",
        "profit.csv",
        "temperature.csv",
    ] {
        let body = fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(body.starts_with("# p2hh v"), "{name}");
    }
}

#[test]
fn zero_epsilon_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = plan(dir.path(), &["--epsilon", "0"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epsilon"));
}

#[test]
fn gaussian_requires_epsilon_below_half() {
    let dir = tempfile::tempdir().unwrap();
    let out = plan(dir.path(), &["--mode", "gaussian", "--epsilon", "0.6"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn zero_samples_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = plan(dir.path(), &[]);
    assert_eq!(code(&out), 0);
    let out = evaluate(dir.path(), &dir.path().join("solution.csv"), &["--samples", "0"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_solution_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = evaluate(dir.path(), &dir.path().join("absent.csv"), &[]);
    assert_eq!(code(&out), 5);
}

#[test]
fn missing_config_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let absent = dir.path().join("absent.toml");
    let out = p2hh(&["plan", "-c", absent.to_str().unwrap()]);
    assert_eq!(code(&out), 5);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[run]\nmood = \"drcc\"\n").unwrap();
    let out = p2hh(&["plan", "-c", config.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn solution_of_another_instance_is_a_dimension_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&plan(dir.path(), &[])), 0);
    let desk = fixture("desk");
    let out = p2hh(&[
        "evaluate",
        "-c",
        desk.to_str().unwrap(),
        "-o",
        dir.path().to_str().unwrap(),
        "--solution",
        dir.path().join("solution.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 6, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn exported_program_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = plan(dir.path(), &["--export-cbf"]);
    assert_eq!(code(&out), 0);
    let cbf = dir.path().join("program.cbf");
    let first = fs::read_to_string(&cbf).unwrap();
    assert!(first.contains("VER\n"));
    let again = dir.path().join("again.cbf");
    let config = fixture("small");
    let out = p2hh(&[
        "export",
        "-c",
        config.to_str().unwrap(),
        "--cbf",
        again.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(first, fs::read_to_string(&again).unwrap());
}

#[test]
fn reruns_write_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        assert_eq!(code(&plan(dir, &[])), 0);
        let solution = dir.join("solution.csv");
        assert_eq!(code(&evaluate(dir, &solution, &["--samples", "40"])), 0);
    }
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 8);
    for name in names {
        let x = fs::read(a.path().join(&name)).unwrap();
        let y = fs::read(b.path().join(&name)).unwrap();
        assert_eq!(x, y, "{name:?} differs");
    }
}

#[test]
fn scenario_flag_conflicts_with_switches() {
    let dir = tempfile::tempdir().unwrap();
    let out = plan(dir.path(), &["--scenario", "3", "--no-p2hh"]);
    assert_eq!(code(&out), 2);
}
