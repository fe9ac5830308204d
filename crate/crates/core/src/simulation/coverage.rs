use rayon::prelude::*;
use serde::Serialize;

use super::{binomial_se, log_volume, EffectDiagnostics, Harness, SimConfig, SimEstimator};
use crate::covariance::{CovEstimate, Law};
use crate::error::Result;
use crate::numerics::chi2::noncentral_chi2_quantile;
use crate::numerics::linalg::{self, SpdMatrix};

#[derive(Debug, Clone, Serialize)]
pub struct MethodCoverage {
    pub method: String,
    pub covered: usize,
    /// Reps in which the method produced a set.
    pub valid: usize,
    pub failed: usize,
    pub coverage: f64,
    pub se: f64,
    /// Mean of `log vol(method) - log vol(reference)` over reps where both exist.
    pub rel_log_volume: Option<f64>,
    /// Mean non-centrality used (conditional sets).
    pub mean_lambda: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub config: SimConfig,
    pub reps: usize,
    pub methods: Vec<MethodCoverage>,
    /// Method whose log-volume is subtracted in `rel_log_volume`.
    pub reference: String,
    pub beta: f64,
    /// Diagnostics of the fixed effects (conditional law) or their average
    /// over reps (marginal law).
    pub diagnostics: EffectDiagnostics,
}

impl CoverageReport {
    pub fn method(&self, name: &str) -> Option<&MethodCoverage> {
        self.methods.iter().find(|m| m.method == name)
    }
}

#[derive(Debug, Clone, Copy)]
struct Outcome {
    covered: bool,
    log_volume: f64,
    lambda: Option<f64>,
}

const N_METHODS: usize = 5;
const MARGINAL_KNOWN: usize = 0;
const MARGINAL_EST: usize = 1;
const ORACLE: usize = 2;
const CONDITIONAL_KNOWN: usize = 3;
const CONDITIONAL_EST: usize = 4;

fn method_names(est: SimEstimator) -> [String; N_METHODS] {
    [
        "marginal_known".into(),
        format!("marginal_{}", est.name()),
        "conditional_oracle".into(),
        "conditional_known".into(),
        format!("conditional_{}", est.name()),
    ]
}

struct RepOutcome {
    methods: [Option<Outcome>; N_METHODS],
    diagnostics: EffectDiagnostics,
}

fn estimated_outcome(cov: &CovEstimate, diff: &nalgebra::DVector<f64>, m: usize, alpha: f64) -> Result<Outcome> {
    let chol = SpdMatrix::new(linalg::symmetrized(&cov.sigma))?;
    let lambda = cov.lambda_hat.unwrap_or(0.0);
    let threshold = noncentral_chi2_quantile(m as f64, lambda, 1.0 - alpha)?;
    Ok(Outcome {
        covered: chol.inv_quad_form(diff) <= threshold,
        log_volume: log_volume(chol.log_det(), threshold, m),
        lambda: cov.lambda_hat,
    })
}

fn one_rep(h: &Harness, rep: usize, oracle_fixed: Option<(f64, f64)>) -> Result<RepOutcome> {
    let cfg = &h.cfg;
    let m = h.m();
    let k = &h.known;
    let data = h.draw(rep)?;
    let mut methods = [None; N_METHODS];

    let (mu_known, beta) = k.mu_hat(&data.ds, &h.tg);
    let diff = &mu_known - &data.mu;
    methods[MARGINAL_KNOWN] = Some(Outcome {
        covered: k.chol_marginal.inv_quad_form(&diff) <= k.chi2_threshold,
        log_volume: log_volume(k.chol_marginal.log_det(), k.chi2_threshold, m),
        lambda: None,
    });
    let cond_stat = k.chol_conditional.inv_quad_form(&diff);
    let cond_logdet = k.chol_conditional.log_det();
    if cfg.oracle_lambda {
        let (lambda, threshold) = match oracle_fixed {
            Some(pair) => pair,
            None => {
                let l = k.oracle_lambda(&data.ds, &data.v);
                (l, noncentral_chi2_quantile(m as f64, l, 1.0 - cfg.alpha)?)
            }
        };
        methods[ORACLE] = Some(Outcome {
            covered: cond_stat <= threshold,
            log_volume: log_volume(cond_logdet, threshold, m),
            lambda: Some(lambda),
        });
    }
    let lambda = k.lambda_hat(&data.ds, &beta);
    let threshold = noncentral_chi2_quantile(m as f64, lambda, 1.0 - cfg.alpha)?;
    methods[CONDITIONAL_KNOWN] = Some(Outcome {
        covered: cond_stat <= threshold,
        log_volume: log_volume(cond_logdet, threshold, m),
        lambda: Some(lambda),
    });

    if cfg.estimator != SimEstimator::KnownDelta {
        // A failed fit or covariance estimate removes both estimated columns.
        let est = h.estimate(&data.ds, true, true).and_then(|e| {
            let diff = &e.mu_hat - &data.mu;
            let marg = estimated_outcome(e.marginal.as_ref().expect("requested"), &diff, m, cfg.alpha)?;
            let cond = estimated_outcome(e.conditional.as_ref().expect("requested"), &diff, m, cfg.alpha)?;
            Ok((marg, cond))
        });
        if let Ok((marg, cond)) = est {
            methods[MARGINAL_EST] = Some(marg);
            methods[CONDITIONAL_EST] = Some(cond);
        }
    }
    Ok(RepOutcome { methods, diagnostics: EffectDiagnostics::of(&data.v, cfg.sigma_v2) })
}

/// Coverage of the five kinds of confidence ellipsoid: marginal and
/// conditional at the true variance components, the conditional set with the
/// true non-centrality, and marginal and conditional sets at estimated
/// components (omitted for [`SimEstimator::KnownDelta`]).
pub fn run_coverage(cfg: &SimConfig) -> Result<CoverageReport> {
    let h = Harness::new(cfg)?;
    let m = h.m();
    let oracle_fixed = match cfg.law {
        Law::Conditional if cfg.oracle_lambda => {
            let l = h.known.oracle_lambda(&h.ds, &h.pop.v);
            Some((l, noncentral_chi2_quantile(m as f64, l, 1.0 - cfg.alpha)?))
        }
        _ => None,
    };
    let outcomes: Vec<Option<RepOutcome>> =
        (0..cfg.reps).into_par_iter().map(|rep| one_rep(&h, rep, oracle_fixed).ok()).collect();

    let names = method_names(cfg.estimator);
    let estimated = cfg.estimator != SimEstimator::KnownDelta;
    let reference = if estimated { MARGINAL_EST } else { MARGINAL_KNOWN };
    let active: Vec<usize> = (0..N_METHODS)
        .filter(|&j| match j {
            MARGINAL_EST | CONDITIONAL_EST => estimated,
            ORACLE => cfg.oracle_lambda,
            _ => true,
        })
        .collect();

    let mut methods = Vec::with_capacity(active.len());
    for &j in &active {
        let (mut covered, mut valid) = (0usize, 0usize);
        let (mut vol_sum, mut vol_n) = (0.0, 0usize);
        let (mut lam_sum, mut lam_n) = (0.0, 0usize);
        for o in outcomes.iter().flatten() {
            let Some(out) = o.methods[j] else { continue };
            valid += 1;
            covered += out.covered as usize;
            if let Some(r) = o.methods[reference] {
                vol_sum += out.log_volume - r.log_volume;
                vol_n += 1;
            }
            if let Some(l) = out.lambda {
                lam_sum += l;
                lam_n += 1;
            }
        }
        let coverage = if valid > 0 { covered as f64 / valid as f64 } else { f64::NAN };
        methods.push(MethodCoverage {
            method: names[j].clone(),
            covered,
            valid,
            failed: cfg.reps - valid,
            coverage,
            se: binomial_se(coverage, valid),
            rel_log_volume: (vol_n > 0).then(|| vol_sum / vol_n as f64),
            mean_lambda: (lam_n > 0).then(|| lam_sum / lam_n as f64),
        });
    }

    let diagnostics = match cfg.law {
        Law::Conditional => EffectDiagnostics::of(&h.pop.v, cfg.sigma_v2),
        Law::Marginal => {
            let ds: Vec<EffectDiagnostics> = outcomes.iter().flatten().map(|o| o.diagnostics).collect();
            let k = ds.len().max(1) as f64;
            EffectDiagnostics {
                c1: ds.iter().map(|d| d.c1).sum::<f64>() / k,
                c2: ds.iter().map(|d| d.c2).sum::<f64>() / k,
            }
        }
    };
    Ok(CoverageReport {
        config: cfg.clone(),
        reps: cfg.reps,
        methods,
        reference: names[reference].clone(),
        beta: h.pop.beta,
        diagnostics,
    })
}

/// Coverage under the marginal law for each configuration.
pub fn run_marginal_table(cfgs: &[SimConfig]) -> Result<Vec<CoverageReport>> {
    cfgs.iter()
        .map(|c| {
            let mut c = c.clone();
            c.law = Law::Marginal;
            run_coverage(&c)
        })
        .collect()
}
