//! End-to-end tests of the experiment runner binary: exit codes, output
//! files, reproducibility, and the cache.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_optresp"))
}

fn read_json(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("report.json")).expect("report.json exists");
    serde_json::from_str(&text).expect("report.json parses")
}

#[test]
fn missing_problem_is_a_config_error() {
    let out = bin().args(["--map", "pomeau-manneville"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("problem"),
        "stderr should name the field: {err}"
    );
}

#[test]
fn missing_map_is_a_config_error() {
    let out = bin().args(["--problem", "spectrum"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("map"));
}

#[test]
fn invalid_values_are_config_errors() {
    for args in [
        vec![
            "--problem",
            "spectrum",
            "--map",
            "pomeau-manneville",
            "--epsilon",
            "0",
        ],
        vec![
            "--problem",
            "spectrum",
            "--map",
            "pomeau-manneville",
            "--epsilon",
            "1.5",
        ],
        vec!["--problem", "spectrum", "--map", "nosuchmap"],
        vec!["--problem", "nosuchproblem", "--map", "pomeau-manneville"],
        vec![
            "--problem",
            "spectrum",
            "--map",
            "pomeau-manneville",
            "--observable",
            "nosuchfn",
        ],
    ] {
        let out = bin().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "args: {args:?}");
    }
}

#[test]
fn malformed_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "problem = [not toml").unwrap();
    let out = bin()
        .args(["--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_cell_invariant_density() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "--problem",
            "invariant-density",
            "--map",
            "pomeau-manneville",
            "--n",
            "1",
            "--epsilon",
            "0.3",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("invariant_density.csv")).unwrap();
    let last = text.lines().last().unwrap();
    assert_eq!(last, "0.5,1");
}

#[test]
fn spectrum_run_reports_unit_top_eigenvalue() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "--problem",
            "spectrum",
            "--map",
            "pomeau-manneville",
            "--n",
            "40",
            "--epsilon",
            "0.2",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = read_json(dir.path());
    let top = &report["lambda_top"];
    assert!((top["re"].as_f64().unwrap() - 1.0).abs() < 1e-8);
    let sel = &report["lambda_selected"];
    assert!(sel["re"].as_f64().unwrap().abs() < 1.0);
    // spectrum.csv holds one line per eigenvalue plus headers
    let text = std::fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    assert_eq!(text.lines().count(), 42);
    assert!(dir.path().join("eigenpair.csv").exists());
}

fn strip_timings(mut v: serde_json::Value) -> serde_json::Value {
    v.as_object_mut().unwrap().remove("timings_ms");
    v
}

#[test]
fn identical_config_and_seed_reproduce_reports() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    for d in [&d1, &d2] {
        let out = bin()
            .args([
                "--problem",
                "expectation-kernel",
                "--map",
                "pomeau-manneville",
                "--n",
                "24",
                "--epsilon",
                "0.2",
                "--seed",
                "5",
                "--out",
                d.path().to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    // identical reports modulo output paths and timings
    let mut r1 = strip_timings(read_json(d1.path()));
    let mut r2 = strip_timings(read_json(d2.path()));
    r1["config"]["output_dir"] = serde_json::Value::Null;
    r2["config"]["output_dir"] = serde_json::Value::Null;
    assert_eq!(r1, r2);
    // byte-identical perturbation files
    let m1 = std::fs::read(d1.path().join("perturbation_matrix.csv")).unwrap();
    let m2 = std::fs::read(d2.path().join("perturbation_matrix.csv")).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn overlay_columns_agree_at_zero_scale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(
        &cfg_path,
        r#"
problem = "mixing-map"
n = 48
epsilon = 0.15
overlay_scale = 0.0

[map]
name = "pomeau-manneville"
"#,
    )
    .unwrap();
    let out = bin()
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(dir.path().join("overlay.csv")).unwrap();
    for line in text.lines().skip(2) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[1], cols[2], "scale 0 must leave the map unchanged");
    }
}

#[test]
fn overlay_range_stays_near_unit_interval() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "--problem",
            "expectation-map",
            "--map",
            "pomeau-manneville",
            "--n",
            "100",
            "--epsilon",
            "0.1",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("overlay.csv")).unwrap();
    for line in text.lines().skip(2) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(
            cols[2] > -0.05 && cols[2] < 1.05,
            "overlay far out of range: {line}"
        );
    }
}

#[test]
fn verify_suite_passes_on_toy_system() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "--problem",
            "verify-response",
            "--map",
            "pomeau-manneville",
            "--n",
            "8",
            "--epsilon",
            "0.25",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = read_json(dir.path());
    assert_eq!(report["verification_pass"], serde_json::Value::Bool(true));
    let checks = report["verification"].as_array().unwrap();
    assert!(checks.len() >= 10);
    assert!(checks.iter().all(|c| c["pass"].as_bool().unwrap()));
}

#[test]
fn infeasible_threshold_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "--problem",
            "expectation-kernel",
            "--map",
            "pomeau-manneville",
            "--n",
            "16",
            "--epsilon",
            "0.2",
            "--kernel-threshold",
            "1e9",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible"));
}

#[test]
fn cache_is_reused_on_matching_key() {
    let dir = tempfile::tempdir().unwrap();
    let args = |d: &Path| {
        vec![
            "--problem".to_string(),
            "spectrum".into(),
            "--map".into(),
            "interval-exchange".into(),
            "--n".into(),
            "32".into(),
            "--epsilon".into(),
            "0.15".into(),
            "--use-cache".into(),
            "--out".into(),
            d.to_str().unwrap().to_string(),
        ]
    };
    let out = bin().args(args(dir.path())).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let r1 = read_json(dir.path());
    assert_eq!(r1["assembly"]["cache_hit"], serde_json::Value::Bool(false));

    let out = bin().args(args(dir.path())).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let r2 = read_json(dir.path());
    assert_eq!(r2["assembly"]["cache_hit"], serde_json::Value::Bool(true));
    assert_eq!(r1["lambda_selected"], r2["lambda_selected"]);
}

#[test]
fn table_map_from_csv_runs() {
    let dir = tempfile::tempdir().unwrap();
    let sample = dir.path().join("map.csv");
    std::fs::write(
        &sample,
        "x,T\n0.0,0.2\n0.25,0.8\n0.5,0.4\n0.75,0.9\n1.0,0.3\n",
    )
    .unwrap();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(
        &cfg_path,
        format!(
            r#"
problem = "spectrum"
n = 32
epsilon = 0.2

[map]
name = "table"
file = "{}"
"#,
            sample.display()
        ),
    )
    .unwrap();
    let out = bin()
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn custom_interval_exchange_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(
        &cfg_path,
        r#"
problem = "spectrum"
n = 32
epsilon = 0.2
eig_selector = "largest-modulus"

[map]
name = "interval-exchange"
lengths = [0.25, 0.25, 0.25, 0.25]
order = [2, 1, 4, 3]
"#,
    )
    .unwrap();
    let out = bin()
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn oversized_verification_step_fails_with_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("exp.toml");
    std::fs::write(
        &cfg_path,
        r#"
problem = "verify-response"
n = 16
epsilon = 0.25
verification_deltas = [0.4]

[map]
name = "pomeau-manneville"
"#,
    )
    .unwrap();
    let out = bin()
        .args([
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    // the report still lands on disk with the failing checks flagged
    let report = read_json(dir.path());
    assert_eq!(report["verification_pass"], serde_json::Value::Bool(false));
    let checks = report["verification"].as_array().unwrap();
    assert!(checks.iter().any(|c| !c["pass"].as_bool().unwrap()));
}
