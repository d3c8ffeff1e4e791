use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fpdelta"))
}

fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, contents).unwrap();
    path
}

fn p4(dir: &Path) -> PathBuf {
    write(dir, "p4.csv", "id,y0,y1\n1,1,2\n2,2,4\n3,3,6\n4,4,8\n")
}

fn big(dir: &Path) -> PathBuf {
    let mut csv = String::from("id,y0,y1\n");
    let (b0, b1) = ([1, 2, 3, 4], [3, 3, 5, 9]);
    for i in 0..2000 {
        csv.push_str(&format!("{},{},{}\n", i + 1, b0[i % 4], b1[i % 4]));
    }
    write(dir, "big.csv", &csv)
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

#[test]
fn variance_reports_ratio_quadratic_form() {
    let dir = tempfile::tempdir().unwrap();
    let pop = p4(dir.path());
    let out = bin()
        .args(["variance", "--pop"])
        .arg(&pop)
        .args(["--functional", "ratio", "--n1", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["subcommand"], "variance");
    assert!(v["tool_version"].is_string());
    assert_eq!(v["config"]["margin"], 2);
    let qf = v["results"]["delta"]["quadratic_form"].as_f64().unwrap();
    assert!((qf - 1.066666666666667).abs() < 1e-12);
    assert!((v["results"]["ratio_closed_form"].as_f64().unwrap() - 16.0 / 15.0).abs() < 1e-12);
    assert_eq!(v["results"]["delta"]["degenerate_gradient"], false);
}

#[test]
fn enumerate_reports_exact_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let pop = p4(dir.path());
    let out = bin()
        .args(["enumerate", "--pop"])
        .arg(&pop)
        .args(["--functional", "difference", "--n1", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["results"]["count"], 6);
    assert!((v["results"]["variance"].as_f64().unwrap() - 3.75).abs() < 1e-12);
}

#[test]
fn enumeration_cap_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let pop = p4(dir.path());
    let out = bin()
        .env("FPDELTA_ENUM_CAP", "5")
        .args(["enumerate", "--pop"])
        .arg(&pop)
        .args(["--functional", "difference", "--n1", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["error"]["kind"], "cap_exceeded");
}

#[test]
fn simulate_is_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let pop = big(dir.path());
    let before = std::fs::read(&pop).unwrap();
    let run = |workers: &str| {
        bin()
            .args(["simulate", "--pop"])
            .arg(&pop)
            .args(["--functional", "ratio", "--n1", "1000", "--R", "50000", "--seed", "7", "--workers", workers])
            .output()
            .unwrap()
    };
    let a = run("1");
    let b = run("4");
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(run("4").stdout, b.stdout);
    assert_eq!(std::fs::read(&pop).unwrap(), before);
    let v = json(&a);
    assert!(v["results"]["ks_distance"].as_f64().unwrap() < 0.02);
    assert!(v["results"].get("wall_time").is_none());
}

#[test]
fn coverage_with_draws_dump() {
    let dir = tempfile::tempdir().unwrap();
    let pop = big(dir.path());
    let draws = dir.path().join("draws.csv");
    let out = bin()
        .args(["coverage", "--pop"])
        .arg(&pop)
        .args(["--functional", "difference", "--p", "0.5", "--R", "2000", "--seed", "3", "--level", "0.9"])
        .arg("--draws-csv")
        .arg(&draws)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["config"]["margin"], 1000);
    assert_eq!(v["config"]["p"], 0.5);
    let cov = v["results"]["coverage"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cov));
    let dumped = std::fs::read_to_string(&draws).unwrap();
    assert_eq!(dumped.lines().count(), 2001);
    assert!(dumped.starts_with("index,estimate,plugin_variance,standardized"));
}

#[test]
fn conditions_trace_with_csv() {
    let dir = tempfile::tempdir().unwrap();
    let pop = write(dir.path(), "s.csv", "id,y0\na,1\nb,2\nc,3\nd,4\n");
    let csv = dir.path().join("trace.csv");
    let out = bin()
        .args(["conditions", "--pop"])
        .arg(&pop)
        .args(["--ks", "1,2,4", "--p", "0.5", "--trace-csv"])
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let rows = v["results"]["rows"].as_array().unwrap();
    let ratios: Vec<f64> = rows.iter().map(|r| r["ratio"].as_f64().unwrap()).collect();
    for (got, want) in ratios.iter().zip([0.675, 0.39375, 0.2109375]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert_eq!(v["results"]["ratio_decreasing"], true);
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
}

#[test]
fn moments_and_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let pop = p4(dir.path());
    let out = bin().args(["moments", "--pop"]).arg(&pop).output().unwrap();
    let v = json(&out);
    assert_eq!(v["results"]["m1"], 9.0);
    assert!((v["results"]["s10"].as_f64().unwrap() - 10.0 / 3.0).abs() < 1e-12);

    let out = bin()
        .args(["estimate", "--pop"])
        .arg(&pop)
        .args(["--functional", "difference", "--n1", "2", "--z", "1100"])
        .output()
        .unwrap();
    let v = json(&out);
    assert_eq!(v["results"]["estimate"], -0.5);
    assert_eq!(v["results"]["plugin_variance"], 1.25);
    assert_eq!(v["config"]["assignment"], "1100");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let pop = p4(dir.path());
    assert_eq!(bin().arg("bogus").output().unwrap().status.code(), Some(2));
    let out = bin()
        .args(["variance", "--pop"])
        .arg(&pop)
        .args(["--functional", "ratio"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["variance", "--pop"])
        .arg(&pop)
        .args(["--functional", "ratio", "--p", "1.5"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["error"]["kind"], "invalid_proportion");
    let out = bin()
        .args(["variance", "--pop"])
        .arg(&pop)
        .args(["--functional", "cube", "--n1", "2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["error"]["kind"], "unknown_functional");
    let out = bin()
        .args(["moments", "--kind", "survey", "--pop"])
        .arg(&pop)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&out)["error"]["kind"], "kind_mismatch");
}

#[test]
fn report_written_to_output_path() {
    let dir = tempfile::tempdir().unwrap();
    let pop = p4(dir.path());
    let target = dir.path().join("report.json");
    let out = bin().args(["moments", "--pop"]).arg(&pop).arg("-o").arg(&target).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&target).unwrap()).unwrap();
    assert_eq!(v["subcommand"], "moments");
}
