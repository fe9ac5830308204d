use std::fmt::Write as _;
use std::path::Path;

use mixinf::covariance::{sigma_conditional, sigma_marginal, CovEstimate, Law};
use mixinf::estimation::{fit_henderson3_ner, fit_reml, RemlOptions, VarianceFit};
use mixinf::inference::{project_onto_ellipsoid, test_linear, tukey_all_pairs, EllipsoidTest, LinearHypothesis};
use mixinf::model::{
    build_ner, check_tukey_conditions, icc, LmmDataset, MixedTargets, NestedErrorStructure, VarianceParams,
};
use mixinf::prediction::{blup_components, eblup};
use mixinf::simulation::EffectDiagnostics;
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::config::{Builder, ClusterRef, Estimator, LSpec, RunConfig};
use crate::error::{invalid, CliError, CliResult};
use crate::input::{read_table, InputTable};

const NER: NestedErrorStructure = NestedErrorStructure;
const DEFAULT_TUKEY_TOLERANCE: f64 = 1e-8;

/// A command result: the JSON report and an optional plain-text summary.
pub struct Output {
    pub json: Value,
    pub human: Option<String>,
}

pub struct Fitted {
    pub table: InputTable,
    pub ds: LmmDataset,
    pub tg: MixedTargets,
    pub fit: VarianceFit,
}

impl Fitted {
    pub fn load(data: &Path, cfg: &RunConfig) -> CliResult<Self> {
        let table = read_table(data, cfg.intercept)?;
        Self::from_table(table, cfg)
    }

    pub fn from_table(table: InputTable, cfg: &RunConfig) -> CliResult<Self> {
        let (ds, _, tg) = build_ner(&table.spec)?;
        let fit = fit_dataset(&ds, cfg)?;
        Ok(Self { table, ds, tg, fit })
    }

    fn labels(&self) -> Vec<&str> {
        self.ds.ids()
    }

    fn resolve(&self, refs: &[ClusterRef]) -> CliResult<Vec<usize>> {
        let labels = self.labels();
        let mut out = Vec::with_capacity(refs.len());
        for r in refs {
            let i = match r {
                ClusterRef::Index(i) if *i < labels.len() => *i,
                ClusterRef::Index(i) => {
                    return Err(invalid(format!("cluster index {i} out of range (m = {})", labels.len())))
                }
                ClusterRef::Label(s) => {
                    labels.iter().position(|l| l == s).ok_or_else(|| invalid(format!("unknown cluster label '{s}'")))?
                }
            };
            if out.contains(&i) {
                return Err(invalid(format!("cluster '{}' listed twice", labels[i])));
            }
            out.push(i);
        }
        Ok(out)
    }

    fn mu_hat(&self) -> CliResult<DVector<f64>> {
        Ok(eblup(&self.ds, &NER, &self.tg, &self.fit)?.values)
    }

    fn covariance(&self, law: Law) -> CliResult<CovEstimate> {
        Ok(match law {
            Law::Marginal => sigma_marginal(&self.ds, &NER, &self.tg, &self.fit)?,
            Law::Conditional => sigma_conditional(&self.ds, &NER, &self.tg, &self.fit)?,
        })
    }

    fn cluster_json(&self, i: usize) -> Value {
        json!({ "index": i, "label": self.labels()[i], "n": self.ds.block(i).n() })
    }
}

pub fn fit_dataset(ds: &LmmDataset, cfg: &RunConfig) -> CliResult<VarianceFit> {
    Ok(match cfg.estimator {
        Estimator::Reml => fit_reml(ds, &NER, &RemlOptions::default())?,
        Estimator::Henderson3 => fit_henderson3_ner(ds)?,
        Estimator::Known => {
            let d = cfg.delta.clone().ok_or_else(|| invalid("estimator 'known' needs 'delta'"))?;
            VarianceFit::known(ds, &NER, &VarianceParams::new(d)?)?
        }
    })
}

fn matrix_json(m: &DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|r| m.row(r).iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>())
}

fn vector_json(v: &DVector<f64>) -> Value {
    json!(v.iter().copied().collect::<Vec<f64>>())
}

fn delta_json(d: &VarianceParams) -> Value {
    json!({ "sigma_v2": d.get(0), "sigma_e2": d.get(1) })
}

pub fn fit(data: &Path, cfg: &RunConfig) -> CliResult<Output> {
    let f = Fitted::load(data, cfg)?;
    let delta = &f.fit.delta_hat;
    let sizes = f.ds.cluster_sizes();
    let mut clusters = Vec::with_capacity(f.ds.m());
    for i in 0..f.ds.m() {
        let mut c = f.cluster_json(i);
        c["icc"] = json!(icc(delta, sizes[i])?);
        clusters.push(c);
    }
    // Predicted random effects b_i'(y_i - X_i beta_hat) for the sum conditions.
    let comp = blup_components(&f.ds, &NER, &f.tg, delta)?;
    let v_hat: Vec<f64> =
        f.ds.blocks().iter().zip(&comp.b).map(|(blk, b)| b.dot(&(&blk.y - &blk.x * &f.fit.beta_hat))).collect();
    let effects = EffectDiagnostics::of(&v_hat, delta.get(0));
    let similarity = check_tukey_conditions(&f.ds, &NER, &f.tg, delta, &[], DEFAULT_TUKEY_TOLERANCE)?;
    let beta: serde_json::Map<String, Value> =
        f.table.beta_names.iter().cloned().zip(f.fit.beta_hat.iter().map(|b| json!(b))).collect();
    let json = json!({
        "command": "fit",
        "model": "ner",
        "estimator": cfg.estimator.name(),
        "m": f.ds.m(),
        "n": f.ds.n(),
        "clusters": clusters,
        "delta_hat": delta_json(delta),
        "raw_delta": f.fit.raw_delta,
        "beta_hat": beta,
        "vbar": matrix_json(&f.fit.vbar),
        "converged": f.fit.converged,
        "iterations": f.fit.iterations,
        "boundary": f.fit.boundary_flags,
        "loglik": f.fit.loglik,
        "warnings": f.fit.warnings,
        "diagnostics": {
            "min_cluster_size": sizes.iter().min(),
            "max_cluster_size": sizes.iter().max(),
            "predicted_effects": { "c1": effects.c1, "c2": effects.c2 },
            "similarity": {
                "max_h_deviation": similarity.max_h_deviation,
                "max_l_deviation": similarity.max_l_deviation,
                "max_precision_deviation": similarity.max_precision_deviation,
                "tolerance": similarity.tolerance,
                "pass": similarity.pass(),
            },
        },
    });
    Ok(Output { json, human: None })
}

pub fn predict(data: &Path, cfg: &RunConfig) -> CliResult<Output> {
    let f = Fitted::load(data, cfg)?;
    let pred = eblup(&f.ds, &NER, &f.tg, &f.fit)?;
    let marg = f.covariance(Law::Marginal)?;
    let cond = f.covariance(Law::Conditional)?;
    let clusters: Vec<Value> = (0..f.ds.m())
        .map(|i| {
            let mut c = f.cluster_json(i);
            c["prediction"] = json!(pred.values[i]);
            c["se_marginal"] = json!(marg.sigma[(i, i)].sqrt());
            c["se_conditional"] = json!(cond.sigma[(i, i)].sqrt());
            c
        })
        .collect();
    let json = json!({
        "command": "predict",
        "estimator": cfg.estimator.name(),
        "kind": pred.kind,
        "delta_used": delta_json(&pred.delta_used),
        "converged": pred.converged,
        "boundary": pred.boundary,
        "lambda_hat": cond.lambda_hat,
        "clusters": clusters,
    });
    Ok(Output { json, human: None })
}

/// The hypothesis from the `test` section, with the rows' default
/// designated coordinates for projection.
fn hypothesis(f: &Fitted, cfg: &RunConfig) -> CliResult<(LinearHypothesis, Option<Vec<usize>>)> {
    let spec = cfg.test.as_ref().ok_or_else(|| invalid("config has no 'test' section"))?;
    let m = f.ds.m();
    let a = match &spec.a {
        Some(a) if a.len() != m => return Err(invalid(format!("'a' has {} entries, expected m = {m}", a.len()))),
        Some(a) => DVector::from_vec(a.clone()),
        None => DVector::zeros(m),
    };
    match &spec.l {
        LSpec::Rows(rows) => {
            if spec.subset.is_some() {
                return Err(invalid("'subset' is only used with a named L builder"));
            }
            if rows.is_empty() || rows.iter().any(|r| r.len() != m) {
                return Err(invalid(format!("every row of L needs m = {m} entries")));
            }
            let l = DMatrix::from_fn(rows.len(), m, |r, c| rows[r][c]);
            Ok((LinearHypothesis::new(l, a)?, None))
        }
        LSpec::Builder(Builder::WithinSubsetContrasts) => {
            let subset = match &spec.subset {
                Some(s) => f.resolve(s)?,
                None => (0..m).collect(),
            };
            let hyp = LinearHypothesis::centered_within(m, &subset, a)?;
            Ok((hyp, Some(subset[..subset.len() - 1].to_vec())))
        }
    }
}

fn test_json(t: &EllipsoidTest) -> Value {
    serde_json::to_value(t).expect("plain struct")
}

fn test_line(name: &str, t: &EllipsoidTest) -> String {
    format!(
        "{name:<12} {:>12.4} {:>4} {:>10.4} {:>10.4} {:>10.4e} {}\n",
        t.statistic,
        t.df,
        t.noncentrality,
        t.threshold,
        t.p_value,
        if t.reject { "reject" } else { "accept" }
    )
}

pub fn test(data: &Path, cfg: &RunConfig, alpha: f64) -> CliResult<Output> {
    let f = Fitted::load(data, cfg)?;
    let (hyp, _) = hypothesis(&f, cfg)?;
    let mu_hat = f.mu_hat()?;
    let marginal = test_linear(&hyp, &mu_hat, &f.covariance(Law::Marginal)?, alpha)?;
    let conditional = test_linear(&hyp, &mu_hat, &f.covariance(Law::Conditional)?, alpha)?;
    let mut human = format!(
        "{:<12} {:>12} {:>4} {:>10} {:>10} {:>10}\n",
        "set", "statistic", "df", "lambda", "threshold", "p-value"
    );
    human.push_str(&test_line("marginal", &marginal));
    human.push_str(&test_line("conditional", &conditional));
    let json = json!({
        "command": "test",
        "alpha": alpha,
        "estimator": cfg.estimator.name(),
        "hypothesis": { "L": matrix_json(&hyp.l), "a": vector_json(&hyp.a), "rows": hyp.u() },
        "lambda_hat_L": conditional.noncentrality,
        "marginal": test_json(&marginal),
        "conditional": test_json(&conditional),
    });
    Ok(Output { json, human: Some(human) })
}

pub fn tukey(data: &Path, cfg: &RunConfig, alpha: f64) -> CliResult<Output> {
    let f = Fitted::load(data, cfg)?;
    let spec = cfg.tukey.clone().unwrap_or_default();
    let subset = match &spec.subset {
        Some(s) => f.resolve(s)?,
        None => (0..f.ds.m()).collect(),
    };
    if subset.len() < 2 {
        return Err(invalid(format!("the Tukey subset needs at least 2 clusters, got {}", subset.len())));
    }
    let law = cfg.law_or(Law::Conditional);
    let mu_hat = f.mu_hat()?;
    let mut result = tukey_all_pairs(&mu_hat, &f.covariance(law)?, &subset, alpha)?;
    let tolerance = spec.tolerance.unwrap_or(DEFAULT_TUKEY_TOLERANCE);
    let diag = check_tukey_conditions(&f.ds, &NER, &f.tg, &f.fit.delta_hat, &subset, tolerance)?;
    if !diag.h_l_pass {
        result.warnings.push(format!(
            "targets differ within the subset (max |h_i - h_j| = {:.3e}, max |l_i - l_j| = {:.3e}, tolerance {tolerance:.1e})",
            diag.max_h_deviation, diag.max_l_deviation
        ));
    }
    if !diag.precision_pass {
        result.warnings.push(format!(
            "cluster precisions differ within the subset (max deviation {:.3e}, tolerance {tolerance:.1e})",
            diag.max_precision_deviation
        ));
    }
    result.contrasts.sort_by(|x, y| y.statistic.total_cmp(&x.statistic).then((x.i, x.j).cmp(&(y.i, y.j))));
    let labels = f.labels();
    let mut human =
        format!("{:<20} {:<20} {:>12} {:>12} {:>10}\n", "cluster i", "cluster j", "estimate", "statistic", "p-value");
    let contrasts: Vec<Value> = result
        .contrasts
        .iter()
        .map(|c| {
            let _ = writeln!(
                human,
                "{:<20} {:<20} {:>12.4} {:>12.4} {:>10.4e}{}",
                labels[c.i],
                labels[c.j],
                c.estimate,
                c.statistic,
                c.p_value,
                if c.reject { " *" } else { "" }
            );
            let mut v = serde_json::to_value(c).expect("plain struct");
            v["label_i"] = json!(labels[c.i]);
            v["label_j"] = json!(labels[c.j]);
            v
        })
        .collect();
    let json = json!({
        "command": "tukey",
        "alpha": alpha,
        "law": law,
        "estimator": cfg.estimator.name(),
        "subset": subset.iter().map(|&i| f.cluster_json(i)).collect::<Vec<_>>(),
        "m_prime": result.m_prime,
        "threshold": result.threshold,
        "any_reject": result.any_reject,
        "warnings": result.warnings,
        "contrasts": contrasts,
    });
    Ok(Output { json, human: Some(human) })
}

pub fn project(data: &Path, cfg: &RunConfig, alpha: f64) -> CliResult<Output> {
    let f = Fitted::load(data, cfg)?;
    let (hyp, default_designated) = hypothesis(&f, cfg)?;
    let designated = match cfg.project.as_ref().and_then(|p| p.designated.as_ref()) {
        Some(d) => f.resolve(d)?,
        None => default_designated
            .ok_or_else(|| invalid("an explicit L needs 'project.designated', one cluster per row"))?,
    };
    let law = cfg.law_or(Law::Conditional);
    let mu_hat = f.mu_hat()?;
    let cov = f.covariance(law)?;
    let pr = project_onto_ellipsoid(&hyp, &mu_hat, &cov, alpha, &designated)?;
    if !pr.moved {
        return Err(CliError::NothingToDo(format!(
            "the test does not reject at alpha = {alpha} (p-value {:.4}); nothing to project",
            pr.test.p_value
        )));
    }
    if let Some(msg) = &pr.attribution_error {
        return Err(invalid(format!("cannot attribute the adjustment: {msg}")));
    }
    let deltas = pr.coordinate_deltas.as_ref().expect("attributed");
    let mu_star = pr.mu_star.as_ref().expect("attributed");
    let recheck = test_linear(&hyp, mu_star, &cov, alpha)?;
    let labels = f.labels();
    let total: f64 = deltas.iter().map(|(_, d)| d).sum();
    let mut human = format!("{:<20} {:>12} {:>12} {:>12}\n", "cluster", "mu_hat", "adjustment", "mu_star");
    let adjustments: Vec<Value> = deltas
        .iter()
        .map(|&(c, d)| {
            let _ = writeln!(human, "{:<20} {:>12.4} {:>12.4} {:>12.4}", labels[c], mu_hat[c], d, mu_star[c]);
            json!({ "index": c, "label": labels[c], "mu_hat": mu_hat[c], "delta": d, "mu_star": mu_star[c] })
        })
        .collect();
    let _ = writeln!(
        human,
        "total adjustment {total:.4}; statistic at mu_star {:.6} (threshold {:.6})",
        recheck.statistic, recheck.threshold
    );
    let json = json!({
        "command": "project",
        "alpha": alpha,
        "law": law,
        "estimator": cfg.estimator.name(),
        "test": test_json(&pr.test),
        "t": vector_json(&pr.t),
        "t_star": vector_json(&pr.t_star),
        "adjustments": adjustments,
        "total_adjustment": total,
        "mu_star": vector_json(mu_star),
        "recheck": test_json(&recheck),
    });
    Ok(Output { json, human: Some(human) })
}
