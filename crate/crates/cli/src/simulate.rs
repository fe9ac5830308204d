use std::fs::File;
use std::path::Path;

use mixinf::simulation::{
    run_coverage, run_power_linear, run_power_tukey, simulate_dataset, ClusterSizes, PowerReport, SimConfig,
};
use serde_json::{json, Value};

use crate::commands::Output;
use crate::config::{PowerTest, RunConfig};
use crate::error::{invalid, CliResult};
use crate::input::{csv_err, format_f64, write_table};

pub const COVERAGE_COLUMNS: [&str; 14] = [
    "m",
    "n_i",
    "sigma_v2",
    "sigma_e2",
    "reps",
    "alpha",
    "seed",
    "law",
    "estimator",
    "method",
    "coverage",
    "se",
    "rel_log_volume",
    "failed_reps",
];
pub const POWER_COLUMNS: [&str; 4] = ["delta", "method", "power", "se"];

fn sizes_field(n: &ClusterSizes) -> String {
    match n {
        ClusterSizes::Common(k) => k.to_string(),
        ClusterSizes::PerCluster(v) => v.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(";"),
    }
}

fn config_fields(c: &SimConfig) -> Vec<String> {
    vec![
        c.m.to_string(),
        sizes_field(&c.n_i),
        format_f64(c.sigma_v2),
        format_f64(c.sigma_e2),
        c.reps.to_string(),
        format_f64(c.alpha),
        c.seed.to_string(),
        json!(c.law).as_str().expect("string enum").to_string(),
        c.estimator.name().to_string(),
    ]
}

fn opt(v: Option<f64>) -> String {
    v.map(format_f64).unwrap_or_default()
}

/// Runs the coverage cells and the power experiment of the `simulate`
/// section, writing `coverage.csv`, `power.csv` and sample CSVs into `out`.
pub fn simulate(cfg: &RunConfig, out: &Path, seed: Option<u64>, alpha: f64, fast: bool) -> CliResult<Output> {
    let spec = cfg.simulate.as_ref().ok_or_else(|| invalid("config has no 'simulate' section"))?;
    let seed = seed.or(cfg.seed).ok_or_else(|| invalid("simulation needs a seed ('seed' in the config or --seed)"))?;
    if spec.coverage.is_empty() && spec.power.is_none() {
        return Err(invalid("'simulate' has neither coverage cells nor a power experiment"));
    }
    let cells = spec.coverage.iter().map(|c| cfg.sim_config(c, seed, alpha, fast)).collect::<CliResult<Vec<_>>>()?;
    let power_cfg = spec.power.as_ref().map(|p| cfg.sim_config(&p.cell, seed, alpha, fast)).transpose()?;
    if let Some(p) = &spec.power {
        if p.grid.is_empty() || p.tests.is_empty() {
            return Err(invalid("the power experiment needs a non-empty grid and test list"));
        }
    }
    std::fs::create_dir_all(out)?;

    let mut reports = Vec::with_capacity(cells.len());
    if !cells.is_empty() {
        let mut w = csv::Writer::from_writer(File::create(out.join("coverage.csv"))?);
        w.write_record(COVERAGE_COLUMNS).map_err(csv_err)?;
        for (k, c) in cells.iter().enumerate() {
            let r = run_coverage(c)?;
            for mc in &r.methods {
                let mut rec = config_fields(c);
                rec.extend([
                    mc.method.clone(),
                    format_f64(mc.coverage),
                    format_f64(mc.se),
                    opt(mc.rel_log_volume),
                    mc.failed.to_string(),
                ]);
                w.write_record(&rec).map_err(csv_err)?;
            }
            for &rep in &spec.export_reps {
                let (ds, _) = simulate_dataset(c, rep)?;
                write_table(File::create(out.join(format!("sample_c{k}_r{rep}.csv")))?, &ds)?;
            }
            reports.push(r);
        }
        w.flush()?;
    }

    let mut power: Vec<PowerReport> = Vec::new();
    if let (Some(p), Some(pc)) = (&spec.power, &power_cfg) {
        for t in &p.tests {
            power.push(match t {
                PowerTest::Linear => run_power_linear(pc, &p.grid)?,
                PowerTest::Tukey => run_power_tukey(pc, &p.grid)?,
            });
        }
        let mut w = csv::Writer::from_writer(File::create(out.join("power.csv"))?);
        w.write_record(POWER_COLUMNS).map_err(csv_err)?;
        for r in &power {
            for pt in &r.points {
                w.write_record([format_f64(pt.delta), pt.method.clone(), format_f64(pt.power), format_f64(pt.se)])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
    }

    let mut human = String::new();
    for r in &reports {
        human.push_str(&format!(
            "m={} n_i={} ({}, {}) {:?}, {} reps\n",
            r.config.m,
            sizes_field(&r.config.n_i),
            r.config.sigma_v2,
            r.config.sigma_e2,
            r.config.law,
            r.reps
        ));
        for mc in &r.methods {
            human
                .push_str(&format!("  {:<24} {:.4} (se {:.4}, failed {})\n", mc.method, mc.coverage, mc.se, mc.failed));
        }
    }
    let json: Value = json!({
        "command": "simulate",
        "seed": seed,
        "coverage": reports,
        "power": power,
    });
    Ok(Output { json, human: Some(human) })
}
