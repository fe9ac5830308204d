use rayon::prelude::*;
use serde::Serialize;

use super::{binomial_se, effect_vectors, Harness, SimConfig, SimEstimator};
use crate::covariance::Law;
use crate::error::{LmmError, Result};
use crate::inference::clusterwise_coverage;
use crate::model::NestedErrorStructure;
use crate::numerics::range::normal_quantile;

#[derive(Debug, Clone, Serialize)]
pub struct ClusterwiseEntry {
    pub cluster: usize,
    pub v: f64,
    pub covered: usize,
    pub empirical: f64,
    pub se: f64,
    /// Closed-form coverage at the true variance components.
    pub theoretical: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterwiseReport {
    pub config: SimConfig,
    pub reps: usize,
    pub valid: usize,
    pub failed: usize,
    pub clusters: Vec<ClusterwiseEntry>,
    pub average_empirical: f64,
    pub average_theoretical: f64,
}

/// Empirical coverage of the marginal intervals `mu_hat_i +- z sqrt(Sigma_ii)`
/// for every cluster under the conditional law, next to the closed form.
pub fn run_clusterwise(cfg: &SimConfig) -> Result<ClusterwiseReport> {
    if cfg.law != Law::Conditional {
        return Err(LmmError::Argument("cluster-wise coverage is defined under the conditional law".into()));
    }
    let h = Harness::new(cfg)?;
    let m = h.m();
    let z = normal_quantile(1.0 - cfg.alpha / 2.0)?;
    let theory =
        clusterwise_coverage(&h.ds, &NestedErrorStructure, &h.tg, &cfg.delta(), &effect_vectors(&h.pop.v), cfg.alpha)?;
    let known_sd: Vec<f64> = h.known.marginal.sigma.diagonal().iter().map(|s| s.max(0.0).sqrt()).collect();

    let hits: Vec<Option<Vec<bool>>> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| {
            let data = h.draw(rep).ok()?;
            let (mu_hat, sd) = match cfg.estimator {
                SimEstimator::KnownDelta => (h.known.mu_hat(&data.ds, &h.tg).0, known_sd.clone()),
                _ => {
                    let e = h.estimate(&data.ds, true, false).ok()?;
                    let sd =
                        e.marginal.expect("requested").sigma.diagonal().iter().map(|s| s.max(0.0).sqrt()).collect();
                    (e.mu_hat, sd)
                }
            };
            Some((0..m).map(|i| (mu_hat[i] - data.mu[i]).abs() <= z * sd[i]).collect())
        })
        .collect();

    let valid = hits.iter().flatten().count();
    let clusters: Vec<ClusterwiseEntry> = (0..m)
        .map(|i| {
            let covered = hits.iter().flatten().filter(|h| h[i]).count();
            let empirical = covered as f64 / valid.max(1) as f64;
            ClusterwiseEntry {
                cluster: i,
                v: h.pop.v[i],
                covered,
                empirical,
                se: binomial_se(empirical, valid),
                theoretical: theory[i].coverage,
            }
        })
        .collect();
    let average_empirical = clusters.iter().map(|c| c.empirical).sum::<f64>() / m as f64;
    let average_theoretical = clusters.iter().map(|c| c.theoretical).sum::<f64>() / m as f64;
    Ok(ClusterwiseReport {
        config: cfg.clone(),
        reps: cfg.reps,
        valid,
        failed: cfg.reps - valid,
        clusters,
        average_empirical,
        average_theoretical,
    })
}
