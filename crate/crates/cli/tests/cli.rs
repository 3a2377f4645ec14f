use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn lqglm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lqglm"))
        .args(args)
        .env_remove("LQGLM_SEED")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

fn vaso_file(dir: &Path) -> String {
    let out = lqglm(&["dataset", "vaso"]);
    assert!(out.status.success());
    let path = dir.join("vaso.csv");
    fs::write(&path, &out.stdout).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn bundled_data_has_39_rows() {
    let out = lqglm(&["dataset", "vaso"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("volume,rate,y"));
    assert_eq!(text.lines().count(), 40);
}

#[test]
fn ml_fit_reproduces_classical_logistic_row() {
    let out = lqglm(&["fit", "--vaso", "--q", "1.0"]);
    assert_eq!(out.status.code(), Some(0));
    let doc = json(&out);
    assert_eq!(doc["schema"], "lq-glm/1");
    assert_eq!(doc["converged"], true);
    let beta = floats(&doc["beta_q"]);
    let se = floats(&doc["se"]);
    for (b, want) in beta.iter().zip([-2.875, 5.179, 4.562]) {
        assert!((b - want).abs() <= 0.002, "{beta:?}");
    }
    for (s, want) in se.iter().zip([1.321, 1.865, 1.838]) {
        assert!((s - want).abs() <= 0.005, "{se:?}");
    }
    assert_eq!(floats(&doc["weights"]), vec![1.0; 39]);
}

#[test]
fn csv_input_with_log_columns_matches_bundled_fit() {
    let dir = TempDir::new().unwrap();
    let path = vaso_file(dir.path());
    let a = json(&lqglm(&[
        "fit", "--data", &path, "--response", "y", "--family", "bernoulli", "--log", "volume,rate", "--q", "0.9",
    ]));
    let b = json(&lqglm(&["fit", "--vaso", "--q", "0.9"]));
    assert_eq!(a["beta_q"], b["beta_q"]);
    assert_eq!(a["coefficient_names"][1], "log(volume)");
}

#[test]
fn truncated_protocol_matches_reference_robust_row_and_flags_nonconvergence() {
    let out = lqglm(&["fit", "--vaso", "--q", "0.79", "--glm-protocol"]);
    assert_eq!(out.status.code(), Some(2));
    let doc = json(&out);
    assert_eq!(doc["converged"], false);
    let beta = floats(&doc["beta_q"]);
    let se = floats(&doc["se"]);
    for (b, want) in beta.iter().zip([-5.185, 8.234, 7.287]) {
        assert!((b - want).abs() <= 0.02, "{beta:?}");
    }
    for (s, want) in se.iter().zip([2.563, 3.920, 3.455]) {
        assert!((s - want).abs() <= 0.05, "{se:?}");
    }
}

#[test]
fn empty_csv_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("empty.csv");
    fs::write(&path, "").unwrap();
    let out = lqglm(&["fit", "--data", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no rows"));

    fs::write(&path, "volume,rate,y\n").unwrap();
    let out = lqglm(&["fit", "--data", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no rows"));
}

#[test]
fn bad_inputs_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let path = vaso_file(dir.path());
    for args in [
        vec!["fit", "--data", &path, "--family", "gamma"],
        vec!["fit", "--data", &path, "--response", "missing"],
        vec!["fit", "--data", &path, "--q", "0"],
        vec!["fit", "--data", &path, "--log", "nope"],
        vec!["selectq", "--data", &path, "--grid", "0.7"],
        vec!["fit"],
    ] {
        let out = lqglm(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(!out.stderr.is_empty());
    }
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x,y\n1,0\nabc,1\n").unwrap();
    let out = lqglm(&["fit", "--data", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a number"));
}

#[test]
fn selectq_lands_near_079() {
    let out = lqglm(&["selectq", "--vaso", "--grid", "0.70:0.01"]);
    assert_eq!(out.status.code(), Some(0));
    let q = json(&out)["q_opt"].as_f64().unwrap();
    assert!((0.77..=0.81).contains(&q), "{q}");
}

#[test]
fn auto_q_fits_at_the_selected_value() {
    let doc = json(&lqglm(&["fit", "--vaso", "--q", "auto"]));
    assert_eq!(doc["q_used"], doc["q_selection"]["q_opt"]);
}

#[test]
fn wald_statistic_vanishes_at_the_fitted_value() {
    let dir = TempDir::new().unwrap();
    let fit = json(&lqglm(&["fit", "--vaso", "--q", "0.9"]));
    let b1 = fit["beta_q"][0].as_f64().unwrap();
    let h_mat = dir.path().join("e1.csv");
    let h = dir.path().join("h.csv");
    fs::write(&h_mat, "1,0,0\n").unwrap();
    fs::write(&h, format!("{b1:?}\n")).unwrap();
    let out = lqglm(&[
        "test", "--vaso", "--q", "0.9", "--H", h_mat.to_str().unwrap(), "--h", h.to_str().unwrap(), "--stat", "all",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let doc = json(&out);
    let tests = doc["tests"].as_array().unwrap();
    assert_eq!(tests.len(), 4);
    for t in tests {
        let s = t["statistic"].as_f64().unwrap();
        assert!(s.abs() < 1e-6, "{t}");
    }
    assert_eq!(tests[0]["kind"], "wald");
    assert!(tests[3]["p_value"].is_null());
}

#[test]
fn residual_csv_round_trips() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("res.csv");
    for kind in ["standardized", "deviance", "quantile"] {
        let doc = json(&lqglm(&["residuals", "--vaso", "--q", "0.8", "--type", kind, "--seed", "5"]));
        let out = lqglm(&[
            "residuals", "--vaso", "--q", "0.8", "--type", kind, "--seed", "5", "--format", "csv", "--output",
            path.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let from_csv: Vec<f64> = rdr.records().map(|r| r.unwrap()[3].parse().unwrap()).collect();
        let from_json = floats(&doc["values"]);
        assert_eq!(from_csv.len(), 39);
        for (a, b) in from_csv.iter().zip(&from_json) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300), "{kind}: {a} vs {b}");
        }
    }
}

#[test]
fn seed_fixes_output_across_runs_and_jobs() {
    let base = ["simulate", "--n", "50", "--eps", "0.1", "--nu", "5", "--reps", "40", "--q-list", "1.0,0.9"];
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = base.to_vec();
        args.extend_from_slice(extra);
        let out = lqglm(&args);
        assert_eq!(out.status.code(), Some(0));
        out.stdout
    };
    let a = run(&["--seed", "3", "--jobs", "1"]);
    let b = run(&["--seed", "3", "--jobs", "3"]);
    let c = run(&["--seed", "3"]);
    let d = run(&["--seed", "4"]);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_ne!(a, d);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("n,eps,nu,"));

    let env_seeded = Command::new(env!("CARGO_BIN_EXE_lqglm"))
        .args(["envelope", "--vaso", "--q", "0.9", "--reps", "20", "--type", "quantile", "--jobs", "2"])
        .env("LQGLM_SEED", "11")
        .output()
        .unwrap();
    let flag_seeded = lqglm(&["envelope", "--vaso", "--q", "0.9", "--reps", "20", "--type", "quantile", "--seed", "11"]);
    assert_eq!(env_seeded.status.code(), Some(0));
    assert_eq!(env_seeded.stdout, flag_seeded.stdout);
}

#[test]
fn envelope_bands_bracket_the_median() {
    let out = lqglm(&["envelope", "--vaso", "--q", "0.9", "--reps", "30", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    let mut rows = 0;
    for rec in rdr.records() {
        let v: Vec<f64> = rec.unwrap().iter().map(|s| s.parse().unwrap()).collect();
        assert!(v[2] <= v[3] && v[3] <= v[4]);
        rows += 1;
    }
    assert_eq!(rows, 39);
}

#[test]
fn simulate_json_carries_schema() {
    let out = lqglm(&[
        "simulate", "--n", "40", "--eps", "0", "--nu", "1", "--reps", "10", "--q-list", "1", "--format", "json",
    ]);
    let doc = json(&out);
    assert_eq!(doc["schema"], "lq-glm/1");
    assert_eq!(doc["rows"].as_array().unwrap().len(), 1);
}
