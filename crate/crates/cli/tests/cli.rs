use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use mixinf::estimation::{fit_reml, RemlOptions};
use mixinf::model::{LmmDataset, NestedErrorStructure};
use mixinf::simulation::{simulate_dataset, SimConfig, SimEstimator};
use serde_json::{json, Value};
use tempfile::TempDir;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn mixinf(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_mixinf")).args(args).output().expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Runs a command that prints its JSON report and checks it against the
/// shipped schema.
fn report(cmd: &str, data: &Path, config: Option<&Path>) -> Value {
    let mut args = vec![cmd.to_string(), "--data".into(), data.display().to_string()];
    if let Some(c) = config {
        args.extend(["--config".into(), c.display().to_string()]);
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let r = mixinf(&refs);
    assert_eq!(r.code, 0, "{cmd} failed: {}", r.stderr);
    let v: Value = serde_json::from_str(&r.stdout).expect("JSON on stdout");
    assert_schema(cmd, &v);
    v
}

fn assert_schema(cmd: &str, v: &Value) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("schemas/{cmd}.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).expect("valid schema");
    let errors: Vec<String> = validator.iter_errors(v).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{cmd} report violates its schema: {errors:?}");
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn dataset_csv(ds: &LmmDataset) -> String {
    let mut s = String::from("cluster,y\n");
    for b in ds.blocks() {
        for y in b.y.iter() {
            let _ = writeln!(s, "{},{y:?}", b.id);
        }
    }
    s
}

fn simulated(m: usize, n: usize, sv: f64, se: f64, seed: u64) -> LmmDataset {
    simulate_dataset(&SimConfig::new(m, n, sv, se, seed), 0).unwrap().0
}

/// Eight clusters of 20 observations with identical cluster means of 10.
fn equal_means_csv() -> String {
    let mut s = String::from("cluster,y\n");
    for k in 0..8 {
        for r in 0..10 {
            let a = 0.3 + 0.1 * ((k * 7 + r * 3) % 11) as f64;
            let _ = writeln!(s, "c{k},{}", 10.0 + a);
            let _ = writeln!(s, "c{k},{}", 10.0 - a);
        }
    }
    s
}

/// The equal-means fixture with cluster `c3` shifted by five error sd.
fn planted_shift_csv() -> String {
    let mut s = String::from("cluster,y\n");
    for line in equal_means_csv().lines().skip(1) {
        let (c, y) = line.split_once(',').unwrap();
        let y: f64 = y.parse().unwrap();
        let _ = writeln!(s, "{c},{}", if c == "c3" { y + 5.0 } else { y });
    }
    s
}

const KNOWN: &str = r#""estimator":"known","delta":[1.0,1.0]"#;

#[test]
fn fit_two_cluster_toy() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "toy.csv", "cluster,y\na,1.0\na,2.0\nb,2.5\nb,4.0\nb,3.0\n");
    let v = report("fit", &data, None);
    assert_eq!(v["converged"], json!(true));
    assert!(v["delta_hat"]["sigma_e2"].as_f64().unwrap().is_finite());
    assert!(v["beta_hat"]["intercept"].as_f64().unwrap().is_finite());
    assert_eq!(v["clusters"][1]["label"], json!("b"));
    assert_eq!(v["clusters"][1]["n"], json!(3));
}

#[test]
fn fit_recovers_simulated_components() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "sim.csv", &dataset_csv(&simulated(100, 5, 8.0, 2.0, 1)));
    let v = report("fit", &data, None);
    let sv = v["delta_hat"]["sigma_v2"].as_f64().unwrap();
    let se = v["delta_hat"]["sigma_e2"].as_f64().unwrap();
    assert!((sv / 8.0 - 1.0).abs() < 0.25, "sigma_v2 {sv}");
    assert!((se / 2.0 - 1.0).abs() < 0.25, "sigma_e2 {se}");
    assert_eq!(v["m"], json!(100));
}

#[test]
fn missing_response_is_a_validation_error_naming_the_row() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "bad.csv", "cluster,y\na,1\na,2\nb,\nb,4\n");
    let r = mixinf(&["fit", "--data", data.to_str().unwrap()]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("row 3"), "{}", r.stderr);
}

#[test]
fn unknown_config_key_and_bad_flags_are_rejected() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "toy.csv", "cluster,y\na,1\na,2\nb,3\nb,4\n");
    let cfg = write(&dir, "cfg.json", r#"{"estimator":"reml","colour":"blue"}"#);
    let r = mixinf(&["fit", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("colour"));
    assert_eq!(mixinf(&["fit", "--data", data.to_str().unwrap(), "--alpha", "2"]).code, 2);
    assert_eq!(mixinf(&["fit"]).code, 2);
    assert_eq!(mixinf(&["frobnicate"]).code, 2);
}

#[test]
fn henderson_needs_a_design_without_intercept() {
    let dir = TempDir::new().unwrap();
    let mut csv = String::from("cluster,y,x1\n");
    for k in 0..12 {
        for r in 0..4 {
            let x = 1.0 + r as f64 + 0.5 * k as f64;
            let noise = (((k * 13 + r * 7) % 9) as f64 - 4.0) * 0.3;
            let _ = writeln!(csv, "g{k},{},{x}", 2.0 + 0.5 * x + (k % 3) as f64 + noise);
        }
    }
    let data = write(&dir, "h3.csv", &csv);
    let with = write(&dir, "with.json", r#"{"estimator":"henderson3"}"#);
    let r = mixinf(&["fit", "--data", data.to_str().unwrap(), "--config", with.to_str().unwrap()]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("intercept"), "{}", r.stderr);
    let without = write(&dir, "without.json", r#"{"estimator":"henderson3","intercept":false}"#);
    let v = report("fit", &data, Some(&without));
    assert_eq!(v["estimator"], json!("henderson3"));
    assert!(v["beta_hat"]["x1"].as_f64().unwrap().is_finite());
    assert!(v["beta_hat"].get("intercept").is_none());
}

#[test]
fn predict_reports_both_standard_errors() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "sim.csv", &dataset_csv(&simulated(12, 4, 4.0, 4.0, 3)));
    let v = report("predict", &data, None);
    let c = &v["clusters"][0];
    assert!(c["se_marginal"].as_f64().unwrap() > 0.0);
    assert!(c["se_conditional"].as_f64().unwrap() > 0.0);
    assert_eq!(v["kind"], json!("eblup"));
    assert_eq!(v["clusters"].as_array().unwrap().len(), 12);
}

#[test]
fn test_at_the_point_estimate_has_unit_p_values() {
    let dir = TempDir::new().unwrap();
    let m = 15;
    let data = write(&dir, "sim.csv", &dataset_csv(&simulated(m, 5, 8.0, 2.0, 5)));
    let pred = report("predict", &data, None);
    let a: Vec<f64> = pred["clusters"].as_array().unwrap().iter().map(|c| c["prediction"].as_f64().unwrap()).collect();
    let identity: Vec<Vec<f64>> = (0..m).map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let cfg = write(&dir, "cfg.json", &json!({"test": {"L": identity, "a": a}}).to_string());
    let v = report("test", &data, Some(&cfg));
    for set in ["marginal", "conditional"] {
        assert_eq!(v[set]["p_value"].as_f64().unwrap(), 1.0, "{set}");
        assert_eq!(v[set]["reject"], json!(false));
    }
    assert_eq!(v["marginal"]["noncentrality"].as_f64().unwrap(), 0.0);
    assert_eq!(v["lambda_hat_L"], v["conditional"]["noncentrality"]);
}

#[test]
fn within_subset_contrasts_on_sixteen_labelled_clusters() {
    let dir = TempDir::new().unwrap();
    let ds = simulated(20, 4, 4.0, 4.0, 8);
    let labelled = dataset_csv(&ds)
        .lines()
        .enumerate()
        .map(|(k, line)| if k == 0 { line.to_string() } else { format!("Cádiz/school {line}") })
        .collect::<Vec<_>>()
        .join("\n");
    let data = write(&dir, "lab.csv", &labelled);
    let subset: Vec<String> = (0..16).map(|k| format!("Cádiz/school {}", k + 2)).collect();
    let cfg = write(&dir, "cfg.json", &json!({"test": {"L": "within-subset-contrasts", "subset": subset}}).to_string());
    let v = report("test", &data, Some(&cfg));
    let l = v["hypothesis"]["L"].as_array().unwrap();
    assert_eq!(l.len(), 15);
    for row in l {
        let row: Vec<f64> = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(row.len(), 20);
        assert!(row.iter().sum::<f64>().abs() < 1e-12);
        assert_eq!(row[0], 0.0);
    }
    assert_eq!(v["marginal"]["df"], json!(15));
}

#[test]
fn tukey_equal_means_never_reject_and_output_is_ordered() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "eq.csv", &equal_means_csv());
    let cfg = write(&dir, "cfg.json", &format!("{{{KNOWN}}}"));
    let v = report("tukey", &data, Some(&cfg));
    let cs = v["contrasts"].as_array().unwrap();
    assert_eq!(cs.len(), 28);
    assert_eq!(v["any_reject"], json!(false));
    let keys: Vec<(f64, u64, u64)> = cs
        .iter()
        .map(|c| (c["statistic"].as_f64().unwrap(), c["i"].as_u64().unwrap(), c["j"].as_u64().unwrap()))
        .collect();
    for w in keys.windows(2) {
        assert!(w[0].0 > w[1].0 || (w[0].0 == w[1].0 && (w[0].1, w[0].2) < (w[1].1, w[1].2)), "{w:?}");
    }
}

#[test]
fn tukey_finds_a_planted_shift() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "shift.csv", &planted_shift_csv());
    let cfg = write(&dir, "cfg.json", &format!("{{{KNOWN},\"law\":\"conditional\"}}"));
    let v = report("tukey", &data, Some(&cfg));
    let cs = v["contrasts"].as_array().unwrap();
    for c in &cs[..7] {
        assert!(c["label_i"] == json!("c3") || c["label_j"] == json!("c3"), "{c}");
        assert_eq!(c["reject"], json!(true));
    }
    assert!(cs[7..].iter().all(|c| c["reject"] == json!(false)));
}

#[test]
fn tukey_subset_of_one_is_rejected() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "eq.csv", &equal_means_csv());
    let cfg = write(&dir, "cfg.json", &format!("{{{KNOWN},\"tukey\":{{\"subset\":[\"c1\"]}}}}"));
    let r = mixinf(&["tukey", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.code, 2, "{}", r.stderr);
}

#[test]
fn project_lands_on_the_boundary() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "shift.csv", &planted_shift_csv());
    for law in ["marginal", "conditional"] {
        let cfg = write(
            &dir,
            "cfg.json",
            &format!("{{{KNOWN},\"law\":\"{law}\",\"test\":{{\"L\":\"within-subset-contrasts\"}}}}"),
        );
        let v = report("project", &data, Some(&cfg));
        assert_eq!(v["test"]["reject"], json!(true));
        let p = v["recheck"]["p_value"].as_f64().unwrap();
        assert!((p - 0.05).abs() < 1e-6, "{law}: boundary p-value {p}");
        assert_eq!(v["adjustments"].as_array().unwrap().len(), 7);
    }
}

#[test]
fn project_total_is_invariant_to_row_order() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "shift.csv", &planted_shift_csv());
    let row = |k: usize| -> Vec<f64> {
        (0..8)
            .map(|j| {
                if j == 0 {
                    1.0
                } else if j == k {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect()
    };
    let mut totals = Vec::new();
    for order in [vec![1, 2, 3, 4, 5, 6, 7], vec![7, 3, 5, 1, 6, 2, 4]] {
        let l: Vec<Vec<f64>> = order.iter().map(|&k| row(k)).collect();
        let cfg = json!({
            "estimator": "known", "delta": [1.0, 1.0],
            "test": {"L": l}, "project": {"designated": order},
        });
        let cfg = write(&dir, "cfg.json", &cfg.to_string());
        let v = report("project", &data, Some(&cfg));
        totals.push(v["total_adjustment"].as_f64().unwrap());
    }
    assert!((totals[0] - totals[1]).abs() < 1e-9, "{totals:?}");
}

#[test]
fn project_without_rejection_has_nothing_to_do() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "eq.csv", &equal_means_csv());
    let cfg = write(&dir, "cfg.json", &format!("{{{KNOWN},\"test\":{{\"L\":\"within-subset-contrasts\"}}}}"));
    let r = mixinf(&["project", "--data", data.to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert_eq!(r.code, 4, "{}", r.stderr);
}

#[test]
fn human_table_goes_to_stdout_when_writing_reports() {
    let dir = TempDir::new().unwrap();
    let data = write(&dir, "shift.csv", &planted_shift_csv());
    let cfg = write(&dir, "cfg.json", &format!("{{{KNOWN},\"test\":{{\"L\":\"within-subset-contrasts\"}}}}"));
    let out = dir.path().join("out");
    let r = mixinf(&[
        "test",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.starts_with("set"), "{}", r.stdout);
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out.join("test.json")).unwrap()).unwrap();
    assert_schema("test", &v);
}

const SMALL_SIM: &str = r#"{
  "seed": 11,
  "simulate": {
    "coverage": [
      {"m": 6, "n_i": 3, "sigma_v2": 2.0, "sigma_e2": 2.0, "reps": 40, "estimator": "known"},
      {"m": 6, "n_i": [3, 3, 3, 6, 6, 6], "sigma_v2": 2.0, "sigma_e2": 2.0, "reps": 40, "law": "marginal", "estimator": "known"}
    ],
    "power": {"cell": {"m": 6, "n_i": 3, "sigma_v2": 2.0, "sigma_e2": 2.0, "reps": 40, "estimator": "known"},
              "grid": [0.0, 1.0, 3.0], "tests": ["linear", "tukey"]}
  }
}"#;

fn run_simulate(dir: &TempDir, name: &str, config: &str, extra: &[&str]) -> (Run, PathBuf) {
    let cfg = write(dir, &format!("{name}.json"), config);
    let out = dir.path().join(name);
    let mut args = vec!["simulate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (mixinf(&args), out)
}

#[test]
fn simulate_output_schema() {
    let dir = TempDir::new().unwrap();
    let (r, out) = run_simulate(&dir, "small", SMALL_SIM, &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let coverage = std::fs::read_to_string(out.join("coverage.csv")).unwrap();
    let lines: Vec<&str> = coverage.lines().collect();
    assert_eq!(
        lines[0],
        "m,n_i,sigma_v2,sigma_e2,reps,alpha,seed,law,estimator,method,coverage,se,rel_log_volume,failed_reps"
    );
    assert_eq!(lines.len(), 1 + 2 * 3);
    assert!(lines[1].starts_with("6,3,2.0,2.0,40,0.05,11,conditional,known,marginal_known,"), "{}", lines[1]);
    assert!(lines[4].starts_with("6,3;3;3;6;6;6,2.0,2.0,40,0.05,11,marginal,known,marginal_known,"), "{}", lines[4]);
    let power = std::fs::read_to_string(out.join("power.csv")).unwrap();
    let lines: Vec<&str> = power.lines().collect();
    assert_eq!(lines[0], "delta,method,power,se");
    assert_eq!(lines.len(), 1 + 3 * 3);
    assert!(lines[1].starts_with("0.0,marginal_known,"));
    assert!(lines[7].starts_with("0.0,tukey_known,"));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out.join("simulate.json")).unwrap()).unwrap();
    assert_schema("simulate", &v);
}

#[test]
fn simulate_is_deterministic_across_thread_counts() {
    let dir = TempDir::new().unwrap();
    let (a, out_a) = run_simulate(&dir, "one", SMALL_SIM, &["--threads", "1"]);
    let (b, out_b) = run_simulate(&dir, "three", SMALL_SIM, &["--threads", "3"]);
    assert_eq!((a.code, b.code), (0, 0));
    for f in ["coverage.csv", "power.csv", "simulate.json"] {
        assert_eq!(std::fs::read(out_a.join(f)).unwrap(), std::fs::read(out_b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn simulate_needs_a_seed() {
    let dir = TempDir::new().unwrap();
    let (r, _) = run_simulate(&dir, "noseed", &SMALL_SIM.replace("\"seed\": 11,", ""), &[]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    let (r, _) = run_simulate(&dir, "flag", &SMALL_SIM.replace("\"seed\": 11,", ""), &["--seed", "11"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let (r, _) = run_simulate(&dir, "bad", &SMALL_SIM.replace("\"reps\": 40,", "\"reps\": 0,"), &[]);
    assert_eq!(r.code, 2);
}

#[test]
fn fast_mode_cell_runs_within_a_minute() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{"seed": 3, "simulate": {"coverage": [{"m": 10, "n_i": 5, "sigma_v2": 8.0, "sigma_e2": 2.0}]}}"#;
    let start = Instant::now();
    let (r, out) = run_simulate(&dir, "fast", cfg, &["--fast"]);
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(secs < 60.0, "fast cell took {secs:.1}s");
    let coverage = std::fs::read_to_string(out.join("coverage.csv")).unwrap();
    assert!(coverage.lines().nth(1).unwrap().contains(",1000,"));
}

#[test]
fn exported_sample_refits_to_the_in_memory_fit() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{"seed": 21, "simulate": {"coverage": [{"m": 10, "n_i": 5, "sigma_v2": 8.0, "sigma_e2": 2.0, "reps": 5, "estimator": "known"}], "export_reps": [2]}}"#;
    let (r, out) = run_simulate(&dir, "export", cfg, &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let v = report("fit", &out.join("sample_c0_r2.csv"), None);

    let mut sim = SimConfig::new(10, 5, 8.0, 2.0, 21);
    sim.reps = 5;
    sim.estimator = SimEstimator::KnownDelta;
    let (ds, _) = simulate_dataset(&sim, 2).unwrap();
    let fit = fit_reml(&ds, &NestedErrorStructure, &RemlOptions::default()).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + b.abs());
    assert!(close(v["delta_hat"]["sigma_v2"].as_f64().unwrap(), fit.delta_hat.get(0)));
    assert!(close(v["delta_hat"]["sigma_e2"].as_f64().unwrap(), fit.delta_hat.get(1)));
    assert!(close(v["beta_hat"]["intercept"].as_f64().unwrap(), fit.beta_hat[0]));
}
