use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use super::{binomial_se, Harness, RepData, SimConfig, SimEstimator};
use crate::covariance::CovEstimate;
use crate::error::{LmmError, Result};
use crate::inference::tukey::c_plus;
use crate::numerics::chi2::noncentral_chi2_quantile;
use crate::numerics::linalg::{self, SpdMatrix};
use crate::numerics::range::range_quantile;

#[derive(Debug, Clone, Serialize)]
pub struct PowerPoint {
    pub delta: f64,
    pub method: String,
    pub rejections: usize,
    pub valid: usize,
    pub power: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerReport {
    pub config: SimConfig,
    pub reps: usize,
    pub points: Vec<PowerPoint>,
}

impl PowerReport {
    /// Points of one method in grid order.
    pub fn curve(&self, method: &str) -> Vec<&PowerPoint> {
        self.points.iter().filter(|p| p.method == method).collect()
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for p in &self.points {
            if !out.contains(&p.method) {
                out.push(p.method.clone());
            }
        }
        out
    }
}

fn check_grid(deltas: &[f64]) -> Result<()> {
    if deltas.is_empty() || deltas.iter().any(|d| !d.is_finite()) {
        return Err(LmmError::Argument("the shift grid must be non-empty and finite".into()));
    }
    Ok(())
}

/// Per method and rep: one rejection flag per grid point, `None` on failure.
fn aggregate(cfg: &SimConfig, deltas: &[f64], names: &[String], per_rep: &[Vec<Option<Vec<bool>>>]) -> PowerReport {
    let mut points = Vec::with_capacity(names.len() * deltas.len());
    for (j, name) in names.iter().enumerate() {
        for (k, &delta) in deltas.iter().enumerate() {
            let flags: Vec<bool> = per_rep.iter().filter_map(|r| r[j].as_ref().map(|f| f[k])).collect();
            let valid = flags.len();
            let rejections = flags.iter().filter(|f| **f).count();
            let power = if valid > 0 { rejections as f64 / valid as f64 } else { f64::NAN };
            points.push(PowerPoint {
                delta,
                method: name.clone(),
                rejections,
                valid,
                power,
                se: binomial_se(power, valid),
            });
        }
    }
    PowerReport { config: cfg.clone(), reps: cfg.reps, points }
}

struct SetTest {
    chol: SpdMatrix,
    threshold: f64,
}

impl SetTest {
    fn from_estimate(cov: &CovEstimate, m: usize, alpha: f64) -> Result<Self> {
        Ok(Self {
            chol: SpdMatrix::new(linalg::symmetrized(&cov.sigma))?,
            threshold: noncentral_chi2_quantile(m as f64, cov.lambda_hat.unwrap_or(0.0), 1.0 - alpha)?,
        })
    }

    /// Rejections of `H_0: mu = mu_true - delta 1` for every grid point.
    fn flags(&self, mu_hat: &DVector<f64>, mu: &DVector<f64>, deltas: &[f64]) -> Vec<bool> {
        deltas
            .iter()
            .map(|d| self.chol.inv_quad_form(&mu_hat.map_with_location(|i, _, x| x - mu[i] + d)) > self.threshold)
            .collect()
    }
}

/// Power of the ellipsoid tests of `H_0: mu = a` when the truth is
/// `mu = a + 1 delta`, for the marginal and the conditional set at the true
/// and (unless the estimator is known) at estimated variance components.
pub fn run_power_linear(cfg: &SimConfig, deltas: &[f64]) -> Result<PowerReport> {
    check_grid(deltas)?;
    let h = Harness::new(cfg)?;
    let m = h.m();
    let est = cfg.estimator != SimEstimator::KnownDelta;
    let mut names = vec!["marginal_known".to_string(), "conditional_known".to_string()];
    if est {
        names.push(format!("marginal_{}", cfg.estimator.name()));
        names.push(format!("conditional_{}", cfg.estimator.name()));
    }
    let known_marginal = SetTest { chol: h.known.chol_marginal.clone(), threshold: h.known.chi2_threshold };

    let per_rep: Vec<Vec<Option<Vec<bool>>>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let mut out = vec![None; names.len()];
            let Ok(data) = h.draw(rep) else { return out };
            let (mu_known, beta) = h.known.mu_hat(&data.ds, &h.tg);
            out[0] = Some(known_marginal.flags(&mu_known, &data.mu, deltas));
            let lambda = h.known.lambda_hat(&data.ds, &beta);
            if let Ok(threshold) = noncentral_chi2_quantile(m as f64, lambda, 1.0 - cfg.alpha) {
                let t = SetTest { chol: h.known.chol_conditional.clone(), threshold };
                out[1] = Some(t.flags(&mu_known, &data.mu, deltas));
            }
            if est {
                let flags = h.estimate(&data.ds, true, true).and_then(|e| {
                    let mt = SetTest::from_estimate(e.marginal.as_ref().expect("requested"), m, cfg.alpha)?;
                    let ct = SetTest::from_estimate(e.conditional.as_ref().expect("requested"), m, cfg.alpha)?;
                    Ok((mt.flags(&e.mu_hat, &data.mu, deltas), ct.flags(&e.mu_hat, &data.mu, deltas)))
                });
                if let Ok((fm, fc)) = flags {
                    out[2] = Some(fm);
                    out[3] = Some(fc);
                }
            }
            out
        })
        .collect();
    Ok(aggregate(cfg, deltas, &names, &per_rep))
}

/// Any simple contrast within the first `w` clusters exceeding the range
/// quantile, with `c_plus` from the symmetric root of `sigma`.
fn tukey_rejects(mu_hat: &DVector<f64>, root: &DMatrix<f64>, w: usize, threshold: f64) -> bool {
    for i in 0..w {
        for j in (i + 1)..w {
            let cp = c_plus(root, i, j);
            if cp > 0.0 && (mu_hat[i] - mu_hat[j]).abs() / cp > threshold {
                return true;
            }
        }
    }
    false
}

/// Familywise rejection rate of the pairwise tests of equality among the
/// first `m/2` clusters, whose random effects are set equal, when cluster 0 is
/// shifted by `delta`. Uses the conditional covariance estimate.
pub fn run_power_tukey(cfg: &SimConfig, deltas: &[f64]) -> Result<PowerReport> {
    check_grid(deltas)?;
    let h = Harness::new(cfg)?;
    let m = h.m();
    let w = m / 2;
    if w < 2 {
        return Err(LmmError::Argument(format!("pairwise tests need m >= 4, got {m}")));
    }
    let m_prime = (m + 1 - w).max(2);
    let threshold = range_quantile(m_prime, 1.0 - cfg.alpha)?;
    let known_root = linalg::sym_sqrt(&h.known.conditional.sigma)?.sqrt;
    let est = cfg.estimator != SimEstimator::KnownDelta;
    let mut names = vec!["tukey_known".to_string()];
    if est {
        names.push(format!("tukey_{}", cfg.estimator.name()));
    }

    let shifted = |base: &[f64], e: &[f64], delta: f64| -> Result<RepData> {
        let mut v = base.to_vec();
        v[0] += delta;
        h.sample(v, e)
    };

    let per_rep: Vec<Vec<Option<Vec<bool>>>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let mut base = h.effects(rep);
            let common = base[0];
            base[..w].iter_mut().for_each(|x| *x = common);
            let e = h.errors(rep);
            let mut known = Vec::with_capacity(deltas.len());
            let mut estimated = Vec::with_capacity(deltas.len());
            for &d in deltas {
                let Ok(data) = shifted(&base, &e, d) else { return vec![None; names.len()] };
                let (mu_known, _) = h.known.mu_hat(&data.ds, &h.tg);
                known.push(tukey_rejects(&mu_known, &known_root, w, threshold));
                if est {
                    let r = h.estimate(&data.ds, false, true).and_then(|x| {
                        let root = linalg::sym_sqrt(&x.conditional.expect("requested").sigma)?.sqrt;
                        Ok(tukey_rejects(&x.mu_hat, &root, w, threshold))
                    });
                    estimated.push(r.ok());
                }
            }
            let mut out = vec![Some(known)];
            if est {
                // A rep counts for the estimated method only if every grid point fitted.
                out.push(estimated.into_iter().collect::<Option<Vec<bool>>>());
            }
            out
        })
        .collect();
    Ok(aggregate(cfg, deltas, &names, &per_rep))
}
