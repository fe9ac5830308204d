use nalgebra::DVector;
use serde::Serialize;

use super::check_alpha;
use crate::covariance::{k1, k2, l1, l2, AMatrix, CovContext};
use crate::error::{LmmError, Result};
use crate::model::{CovarianceStructure, LmmDataset, MixedTargets, VarianceParams};
use crate::numerics::range::{normal_cdf, normal_quantile};

/// Exact coverage of the marginal interval `mu_tilde_i +- z sd_marg` under
/// the conditional law given `v`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ClusterCoverage {
    /// `E(mu_tilde_i - mu_i | v)`.
    pub bias: f64,
    pub sd_cond: f64,
    pub sd_marg: f64,
    pub coverage: f64,
}

/// Coverage for every cluster at known `delta` and random effects `v`.
///
/// With `rho = sd_marg / sd_cond` and `s = sd_cond` the coverage is
/// `Phi(rho z - bias/s) - Phi(-rho z - bias/s)`.
pub fn clusterwise_coverage(
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    targets: &MixedTargets,
    delta: &VarianceParams,
    v: &[DVector<f64>],
    alpha: f64,
) -> Result<Vec<ClusterCoverage>> {
    check_alpha(alpha)?;
    if v.len() != dataset.m() {
        return Err(LmmError::Dimension { expected: dataset.m(), got: v.len() });
    }
    let ctx = CovContext::new(dataset, structure, targets, delta)?;
    let marg = k1(&ctx, dataset, targets) + k2(&ctx).diagonal();
    let cond = (l1(&ctx) + l2(&ctx)).diagonal();
    let bias = AMatrix::from_context(&ctx, dataset, targets)?.a_z_v(dataset, v);
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    (0..dataset.m())
        .map(|i| {
            let s = cond[i].max(0.0).sqrt();
            if s == 0.0 {
                return Err(LmmError::Degenerate {
                    block: dataset.block(i).id.clone(),
                    detail: "conditional standard deviation is zero".into(),
                });
            }
            let sm = marg[i].max(0.0).sqrt();
            let rho = sm / s;
            let shift = bias[i] / s;
            Ok(ClusterCoverage {
                bias: bias[i],
                sd_cond: s,
                sd_marg: sm,
                coverage: normal_cdf(rho * z - shift) - normal_cdf(-rho * z - shift),
            })
        })
        .collect()
}

pub fn clusterwise_coverage_shift(
    i: usize,
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    targets: &MixedTargets,
    delta: &VarianceParams,
    v: &[DVector<f64>],
    alpha: f64,
) -> Result<ClusterCoverage> {
    if i >= dataset.m() {
        return Err(LmmError::Argument(format!("cluster index {i} out of range")));
    }
    Ok(clusterwise_coverage(dataset, structure, targets, delta, v, alpha)?[i])
}
