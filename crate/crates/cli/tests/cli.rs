//! End-to-end tests driving the compiled binary: report contents,
//! byte-level determinism, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use tubetest_cli::report::{Report, SCHEMA_VERSION};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tubetest"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_file(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

/// Fully estimated single-component binomial null whose adjusted process
/// is constant, plus an output path inside `dir`.
fn point_config(dir: &Path) -> String {
    let out = dir.join("report.json");
    write_file(
        dir,
        "point.cfg",
        &format!(
            "[null]\nfamily = binomial2\npoints = 0.5\nestimation = full\n\n\
             [perturbation]\nfamily = binomial2\nlo = 0.0\nhi = 1.0\n\n\
             [output]\npath = {}\n",
            out.display()
        ),
    )
}

fn fixed_config(dir: &Path, extra: &str, out_name: &str) -> String {
    let out = dir.join(out_name);
    write_file(
        dir,
        &format!("{out_name}.cfg"),
        &format!(
            "[null]\nfamily = binomial2\npoints = 0.5\n\n\
             [perturbation]\nfamily = binomial2\nlo = 0.1\nhi = 0.9\n\n\
             {extra}\n[output]\npath = {}\n",
            out.display()
        ),
    )
}

fn read_report(dir: &Path, name: &str) -> Report {
    let text = std::fs::read_to_string(dir.join(name)).unwrap();
    serde_json::from_str(&text).expect("report re-parses under the schema")
}

#[test]
fn critical_reports_the_half_normal_quantile() {
    let dir = tempfile::tempdir().unwrap();
    let config = point_config(dir.path());
    let out = run(&["critical", &config]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("report.json"), "stdout: {stdout}");

    let report = read_report(dir.path(), "report.json");
    assert_eq!(report.schema_version, SCHEMA_VERSION);
    assert_eq!(report.command, "critical");
    let c = report.results["critical"].as_f64().unwrap();
    assert!((c - 1.6449).abs() < 1e-4, "critical {c}");
    assert_eq!(report.results["alpha"].as_f64(), Some(0.05));
    assert_eq!(report.config_echo["null"]["estimation"], "full");
}

#[test]
fn identical_runs_are_byte_identical_modulo_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write_file(dir.path(), "data.csv", "x1\n0\n1\n2\n1\n1\n0\n2\n1\n0\n1\n");
    let mut raw = Vec::new();
    for name in ["a.json", "b.json"] {
        let config = fixed_config(dir.path(), "", name);
        let out = run(&["test", &config, &csv]);
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        raw.push(std::fs::read_to_string(dir.path().join(name)).unwrap());
    }
    let strip = |text: &str| -> (String, f64) {
        let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
        let obj = v.as_object_mut().unwrap();
        // The config echo records each run's own output path; mask both
        // varying fields before comparing bytes.
        let wall = obj.remove("wall_clock_seconds").unwrap().as_f64().unwrap();
        obj["config_echo"]["output"]
            .as_object_mut()
            .unwrap()
            .remove("path");
        (serde_json::to_string(&v).unwrap(), wall)
    };
    let (a, wall_a) = strip(&raw[0]);
    let (b, wall_b) = strip(&raw[1]);
    assert_eq!(a, b);
    assert!(wall_a > 0.0 && wall_b > 0.0);
}

#[test]
fn seeded_oracle_runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "[mc]\nreplicates = 400\nseed = 7\nthresholds = 1.0, 2.0\n";
    let mut reports = Vec::new();
    for name in ["o1.json", "o2.json"] {
        let config = fixed_config(dir.path(), extra, name);
        let out = run(&["oracle", &config]);
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        let report = read_report(dir.path(), name);
        assert_eq!(report.results["mode"], "field");
        reports.push(report.results.clone());
    }
    assert_eq!(reports[0], reports[1]);
    let rates = reports[0]["exceedance"].as_array().unwrap();
    assert_eq!(rates.len(), 2);
    assert!(rates[0].as_f64().unwrap() >= rates[1].as_f64().unwrap());
}

#[test]
fn tail_curve_is_decreasing() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "[mc]\nthresholds = 1.0, 1.5, 2.0, 2.5\n";
    let config = fixed_config(dir.path(), extra, "tail.json");
    let out = run(&["tail", &config]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report = read_report(dir.path(), "tail.json");
    let tail: Vec<f64> = report.results["tail"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(tail.len(), 4);
    assert!(tail.windows(2).all(|w| w[0] > w[1]), "{tail:?}");
}

#[test]
fn simulate_writes_a_suite_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "[mc]\nreplicates = 3\nseed = 5\n\n[experiment]\nmodels = 1\netas = 0.0\nns = 60\n";
    let config = fixed_config(dir.path(), extra, "suite.json");
    let out = run(&["simulate", &config]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let report = read_report(dir.path(), "suite.json");
    assert_eq!(report.command, "simulate");
    let cells = report.results["reports"].as_array().unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0]["spec"]["model"].as_u64(), Some(1));
    assert_eq!(cells[0]["completed"].as_u64(), Some(3));
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "stderr: {stderr}");
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("tubetest"));
}

#[test]
fn bad_config_exits_one_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_file(
        dir.path(),
        "bad.cfg",
        "[null]\nfamily = binomial2\npoints = 0.5\nbogus_key = 3\n\n\
         [perturbation]\nfamily = binomial2\nlo = 0.1\nhi = 0.9\n",
    );
    let out = run(&["critical", &config]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
}

#[test]
fn missing_config_exits_one() {
    let out = run(&["critical", "/nonexistent/path.cfg"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_csv_exits_one_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixed_config(dir.path(), "", "r.json");
    let csv = write_file(dir.path(), "bad.csv", "x1\n1\npotato\n");
    let out = run(&["test", &config, &csv]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("potato"), "stderr: {stderr}");
}

#[test]
fn out_of_support_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixed_config(dir.path(), "", "r.json");
    let csv = write_file(dir.path(), "data.csv", "x1\n0\n1\n7\n");
    let out = run(&["test", &config, &csv]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("numerical failure"), "stderr: {stderr}");
}
