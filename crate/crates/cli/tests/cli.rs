use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn catbridge(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catbridge"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &TempDir, name: &str, body: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn verify_passes_and_detects_injected_perturbation() {
    let dir = TempDir::new().unwrap();
    let ok = catbridge(&["verify", "--seed", "4"], &dir.path().join("ok"));
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("ok/verify.json")).unwrap()).unwrap();
    assert!(report["properties"].as_array().unwrap().iter().all(|p| p["passed"] == true));

    let bad = catbridge(&["verify", "--inject-perturbation"], &dir.path().join("bad"));
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("[FAIL] converged process"));
}

#[test]
fn degenerate_uniform_reference_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    for cmd in ["sinkhorn", "convergence"] {
        let o = catbridge(&[cmd, "--ref", "unif", "--alpha", "0", "--S", "5"], &dir.path().join(cmd));
        assert_eq!(code(&o), 1);
        assert!(String::from_utf8_lossy(&o.stderr).contains("full support"));
    }
    // Nothing is written when validation fails.
    assert!(!dir.path().join("sinkhorn/plan.csv").exists());
}

#[test]
fn bad_configs_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let unknown = write_config(&dir, "unknown.json", r#"{"alpah": 0.5}"#);
    let nested = write_config(&dir, "nested.json", r#"{"train": {"lr": 1.0}}"#);
    let malformed = write_config(&dir, "malformed.json", "{");
    let cases: [&[&str]; 6] = [
        &["convergence", "--config", &unknown],
        &["toy2d", "--config", &nested],
        &["sinkhorn", "--config", &malformed],
        &["toy2d", "--D", "3"],
        &["toy2d", "--loss", "hinge"],
        &["sinkhorn", "--N", "1,2"],
    ];
    for args in cases {
        assert_eq!(code(&catbridge(args, &dir.path().join("x"))), 1, "{args:?}");
    }
    let missing = catbridge(&["verify", "--config", "/nonexistent/config.json"], &dir.path().join("x"));
    assert_eq!(code(&missing), 1);
}

#[test]
fn constant_cost_gives_the_product_plan() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.json", r#"{"cost": "constant", "S": 4, "p0": "linear", "p1": "uniform"}"#);
    let o = catbridge(&["sinkhorn", "--config", &cfg], dir.path());
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(dir.path().join("plan.csv")).unwrap();
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (i, p): (usize, f64) = (f[0].parse().unwrap(), f[2].parse().unwrap());
        let want = (i + 1) as f64 / 10.0 * 0.25;
        assert!((p - want).abs() < 1e-12, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 16);
}

#[test]
fn convergence_reaches_the_sinkhorn_plan() {
    let dir = TempDir::new().unwrap();
    let o = catbridge(&["convergence", "--S", "8", "--N", "1,4", "--alpha", "0.5"], dir.path());
    assert_eq!(code(&o), 0);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let runs = summary["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    for run in runs {
        assert_eq!(run["fixed_point_matches_sinkhorn"], true);
        let history = fs::read_to_string(dir.path().join(run["history"].as_str().unwrap())).unwrap();
        let kl: Vec<f64> = history.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
        assert!(kl.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }
}

fn assert_same_files(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?} differs");
    }
}

#[test]
fn deterministic_runs_repeat_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "toy.json",
        r#"{"S": 12, "N": 4, "train": {"steps_per_phase": 20, "outer_iterations": 2, "batch_size": 32}, "eval_samples": 500, "trajectories": 5}"#,
    );
    for run in ["a", "b"] {
        let o = catbridge(&["toy2d", "--config", &cfg, "--seed", "9", "--deterministic"], &dir.path().join(format!("toy_{run}")));
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let o = catbridge(&["convergence", "--S", "6", "--N", "2", "--deterministic"], &dir.path().join(format!("conv_{run}")));
        assert_eq!(code(&o), 0);
    }
    assert_same_files(&dir.path().join("toy_a"), &dir.path().join("toy_b"));
    assert_same_files(&dir.path().join("conv_a"), &dir.path().join("conv_b"));
    let summary = fs::read_to_string(dir.path().join("toy_a/summary.json")).unwrap();
    assert!(!summary.contains("train_seconds"));
}
