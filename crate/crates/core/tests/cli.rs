use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_crossgls"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["simulate", "--s", "1024", "--rho", "0.55", "--kappa", "0.55", "--p", "3", "--seed", "7"];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--output", p(&out)]);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_is_byte_identical_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(dir.path(), "a.csv", &[]);
    let b = simulate(dir.path(), "b.csv", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = simulate(dir.path(), "c.csv", &["--theta", "1,1,2"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let header = fs::read_to_string(&a).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "row,col,y,x1,x2");
}

#[test]
fn simulated_csv_round_trips_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let path = simulate(dir.path(), "d.csv", &[]);
    let t = crossgls::ingest_csv(fs::File::open(&path).unwrap(), &Default::default()).unwrap();
    let counts = crossgls::data_model::counts(&t);
    assert_eq!(counts.n_row.iter().sum::<usize>(), t.n_obs());
    assert_eq!(counts.n_col.iter().sum::<usize>(), t.n_obs());
    assert!(counts.n_row.iter().all(|&c| c > 0));
    assert_eq!(t.p(), 3);
}

#[test]
fn fit_writes_versioned_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &["--beta", "1,2,-1"]);
    let out = dir.path().join("fit.json");
    let o = run(&["fit", "--input", p(&data), "--blups", "--table", "--output", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let j = read_json(&out);
    assert_eq!(j["schema_version"], 1);
    assert_eq!(j["status"], "ok");
    assert_eq!(j["variant"], "m3");
    let coefs = j["coefficients"].as_array().unwrap();
    assert_eq!(coefs.len(), 3);
    assert_eq!(coefs[0]["name"], "(Intercept)");
    for (c, truth) in coefs.iter().zip([1.0, 2.0, -1.0]) {
        let est = c["estimate"].as_f64().unwrap();
        let se = c["se"].as_f64().unwrap();
        assert!((est - truth).abs() < 4.0 * se, "{est} vs {truth} (se {se})");
    }
    assert_eq!(j["blups"]["rows"].as_array().unwrap().len(), j["design"]["r"].as_u64().unwrap() as usize);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("estimate") && stderr.contains("x1"));

    let again = dir.path().join("fit2.json");
    let o = run(&["fit", "--input", p(&data), "--blups", "--output", p(&again), "--threads", "1"]);
    assert!(o.status.success());
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn verify_agrees_with_dense_solvers() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("small.csv");
    let o = run(&[
        "simulate", "--s", "180", "--rho", "0.5", "--kappa", "0.5", "--p", "2", "--seed", "3", "--output", p(&data),
    ]);
    assert!(o.status.success());
    let n = fs::read_to_string(&data).unwrap().lines().count() - 1;
    assert!((150..=260).contains(&n), "{n}");
    let out = dir.path().join("v.json");
    let o = run(&["fit", "--input", p(&data), "--verify", "--output", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = &read_json(&out)["verify"];
    assert_eq!(v["passed"], true);
    for key in ["beta", "cov", "blup"] {
        assert!(v["tight_tolerance"][key].as_f64().unwrap() < 1e-6, "{key}: {v}");
    }
}

#[test]
fn noise_only_data_fit_matches_ols() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "iid.csv", &["--theta", "0,0,1", "--beta", "0.5,1,0"]);
    let out = dir.path().join("f.json");
    assert!(run(&["fit", "--input", p(&data), "--output", p(&out)]).status.success());
    let j = read_json(&out);
    for c in j["coefficients"].as_array().unwrap() {
        let d = (c["estimate"].as_f64().unwrap() - c["ols_estimate"].as_f64().unwrap()).abs();
        assert!(d < 0.25 * c["se"].as_f64().unwrap(), "{c}");
    }
}

#[test]
fn divergence_reports_trace_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &[]);
    let out = dir.path().join("e.json");
    let o = run(&["fit", "--input", p(&data), "--max-iter", "1", "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(3));
    let j = read_json(&out);
    assert_eq!(j["status"], "error");
    assert_eq!(j["exit_code"], 3);
    assert_eq!(j["trace"].as_array().unwrap().len(), 1);
}

#[test]
fn exit_codes_by_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "row,col,y\na,b,1\na,c,oops\n").unwrap();
    let o = run(&["fit", "--input", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let collinear = dir.path().join("col.csv");
    let mut s = String::from("row,col,y,u,v\n");
    for (k, (i, j)) in [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 2), (3, 1), (3, 2)].iter().enumerate() {
        s += &format!("r{i},c{j},{},{},{}\n", k as f64 * 0.3, k, 2 * k);
    }
    fs::write(&collinear, s).unwrap();
    let o = run(&["fit", "--input", p(&collinear)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains('v'));

    let data = simulate(dir.path(), "d.csv", &[]);
    assert_eq!(run(&["fit", "--input", p(&data), "--tol", "2"]).status.code(), Some(4));
    assert_eq!(run(&["fit", "--input", p(&data), "--variant", "m7"]).status.code(), Some(4));
    assert_eq!(run(&["fit", "--input", p(&data), "--output", p(&data)]).status.code(), Some(4));
    assert_eq!(run(&["diagnose", "--input", p(&data), "--variant", "m1"]).status.code(), Some(4));
}

#[test]
fn naive_variant_reports_coefficients_without_covariance() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &[]);
    let out = dir.path().join("m1.json");
    let o = run(&["fit", "--input", p(&data), "--variant", "m1", "--output", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let j = read_json(&out);
    assert!(j["cov_beta"].is_null());
    assert!(j["coefficients"][0]["se"].is_null());
    assert!(j.get("diagnostics").is_none());
}

#[test]
fn diagnose_reports_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "d.csv", &["--theta", "3,3,1"]);
    let out = dir.path().join("diag.json");
    let o = run(&["diagnose", "--input", p(&data), "--output", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let d = &read_json(&out)["diagnostics"];
    let naive: Vec<f64> = d["naivete"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let ineff: Vec<f64> = d["inefficiency"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    // the intercept absorbs both random effects, so OLS understates its variance
    assert!(naive[0] > 1.0, "{naive:?}");
    assert!(ineff.iter().all(|&v| v >= 1.0 - 1e-8), "{ineff:?}");
    assert!(d["max_naivete"].as_f64().unwrap() >= naive.iter().copied().fold(0.0, f64::max) - 1e-8);
    assert!(String::from_utf8_lossy(&o.stderr).contains("naivete"));
}

#[test]
fn norms_on_complete_two_by_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("two.csv");
    fs::write(&data, "row,col,y\na,x,1\na,y,4\nb,x,2\nb,y,7\n").unwrap();
    let out = dir.path().join("n.csv");
    let o = run(&["norms", "--from-data", p(&data), "--lambda", "0", "--output", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,norm1,norm2,spectral_radius,norminf,converged");
    let m0: Vec<f64> = lines[1].split(',').skip(1).take(4).map(|v| v.parse().unwrap()).collect();
    for v in m0 {
        assert!((v - 1.0).abs() < 1e-12);
    }
    let m1: Vec<f64> = lines[2].split(',').skip(1).take(4).map(|v| v.parse().unwrap()).collect();
    assert!(m1.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn norms_grid_emits_experiment_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.csv");
    let args = [
        "norms", "--grid", "4/7,4/7", "--s-grid", "256:1024", "--reps", "2", "--variants", "m1,m2", "--output",
    ];
    let o = bin().args(args).arg(&out).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read(&out).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "rho,kappa,S,rep,seed,N,R,C,variant,norm1,norm2,norminf,spectral_radius,seconds,dropped_rows,dropped_cols"
    );
    assert_eq!(lines.count(), 3 * 2 * 2);
    let o = bin().args(args).arg(&out).env("CROSSGLS_THREADS", "1").output().unwrap();
    assert!(o.status.success());
    assert_eq!(first, fs::read(&out).unwrap());
}

#[test]
fn bench_emits_rows_and_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    let o = run(&["bench", "--s-grid", "1024:4096", "--reps", "1", "--min-seconds", "0.01", "--output", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("S,rep,N,R,C,seconds_per_iteration,ols_seconds,iterations"));
    assert!(String::from_utf8_lossy(&o.stderr).contains("backfit slope"));
}
