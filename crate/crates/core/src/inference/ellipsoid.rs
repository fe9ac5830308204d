use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::check_alpha;
use crate::covariance::{lambda_tilde, CovEstimate, Law};
use crate::error::{LmmError, Result};
use crate::numerics::chi2::{noncentral_chi2_quantile, noncentral_chi2_sf};
use crate::numerics::linalg::{self, SpdMatrix};

#[derive(Debug, Clone, Serialize)]
pub struct EllipsoidTest {
    pub statistic: f64,
    pub threshold: f64,
    pub df: usize,
    pub noncentrality: f64,
    pub p_value: f64,
    pub reject: bool,
    pub law: Law,
}

/// Chi-square test of `diff' sigma^{-1} diff` with the given non-centrality
/// (zero under the marginal law).
pub fn ellipsoid_test(
    diff: &DVector<f64>,
    sigma: &DMatrix<f64>,
    noncentrality: f64,
    law: Law,
    alpha: f64,
) -> Result<EllipsoidTest> {
    check_alpha(alpha)?;
    if sigma.nrows() != diff.len() || sigma.ncols() != diff.len() {
        return Err(LmmError::Dimension { expected: diff.len(), got: sigma.nrows() });
    }
    if !(noncentrality >= 0.0 && noncentrality.is_finite()) {
        return Err(LmmError::Argument(format!("non-centrality must be finite and >= 0, got {noncentrality}")));
    }
    let df = diff.len();
    let statistic = SpdMatrix::new(linalg::symmetrized(sigma))?.inv_quad_form(diff);
    let threshold = noncentral_chi2_quantile(df as f64, noncentrality, 1.0 - alpha)?;
    let p_value = noncentral_chi2_sf(statistic, df as f64, noncentrality)?;
    Ok(EllipsoidTest { statistic, threshold, df, noncentrality, p_value, reject: statistic > threshold, law })
}

fn noncentrality_of(cov: &CovEstimate) -> Result<f64> {
    match cov.law {
        Law::Marginal => Ok(0.0),
        Law::Conditional => cov
            .lambda_hat
            .ok_or_else(|| LmmError::Argument("conditional covariance estimate carries no lambda_hat".into())),
    }
}

/// Is `mu0` inside the confidence ellipsoid centred at `mu_hat`?
pub fn ellipsoid_contains(
    mu_hat: &DVector<f64>,
    cov: &CovEstimate,
    mu0: &DVector<f64>,
    alpha: f64,
) -> Result<EllipsoidTest> {
    if mu_hat.len() != cov.m() || mu0.len() != cov.m() {
        return Err(LmmError::Dimension { expected: cov.m(), got: mu_hat.len().min(mu0.len()) });
    }
    ellipsoid_test(&(mu_hat - mu0), &cov.sigma, noncentrality_of(cov)?, cov.law, alpha)
}

/// `H_0: L (mu - a) = 0` with a full-row-rank `u x m` matrix `L`.
#[derive(Debug, Clone)]
pub struct LinearHypothesis {
    pub l: DMatrix<f64>,
    pub a: DVector<f64>,
}

impl LinearHypothesis {
    pub fn new(l: DMatrix<f64>, a: DVector<f64>) -> Result<Self> {
        if l.ncols() != a.len() {
            return Err(LmmError::Dimension { expected: l.ncols(), got: a.len() });
        }
        if l.nrows() == 0 || l.nrows() > l.ncols() {
            return Err(LmmError::Rank(format!("L has {} rows for {} parameters", l.nrows(), l.ncols())));
        }
        let sv = l.clone().svd(false, false).singular_values;
        let top = sv.max();
        let rank = sv.iter().filter(|s| **s > 1e-10 * top).count();
        if top == 0.0 || rank < l.nrows() {
            return Err(LmmError::Rank(format!("L has rank {rank} but {} rows", l.nrows())));
        }
        Ok(Self { l, a })
    }

    /// Contrasts `mu_i - mu_j` for all pairs in `subset` after the first
    /// element, i.e. equality of all mixed parameters in the subset.
    pub fn equal_within(m: usize, subset: &[usize]) -> Result<Self> {
        if subset.len() < 2 || subset.iter().any(|&i| i >= m) {
            return Err(LmmError::Argument("subset needs at least two valid indices".into()));
        }
        let mut l = DMatrix::zeros(subset.len() - 1, m);
        for (r, &j) in subset[1..].iter().enumerate() {
            l[(r, subset[0])] = 1.0;
            l[(r, j)] = -1.0;
        }
        Self::new(l, DVector::zeros(m))
    }

    /// Deviations of the first `w - 1` subset members from the subset mean:
    /// row `r` is `e_{s_r} - (1/w) sum_k e_{s_k}`. Rows sum to zero; the last
    /// member is left out because the full set of deviations is rank `w - 1`.
    pub fn centered_within(m: usize, subset: &[usize], a: DVector<f64>) -> Result<Self> {
        if subset.len() < 2 || subset.iter().any(|&i| i >= m) {
            return Err(LmmError::Argument("subset needs at least two valid indices".into()));
        }
        let w = subset.len() as f64;
        let mut l = DMatrix::zeros(subset.len() - 1, m);
        for r in 0..subset.len() - 1 {
            for &k in subset {
                l[(r, k)] -= 1.0 / w;
            }
            l[(r, subset[r])] += 1.0;
        }
        Self::new(l, a)
    }

    pub fn u(&self) -> usize {
        self.l.nrows()
    }
}

/// Test of `L (mu - a) = 0`. Under the conditional law the non-centrality is
/// re-estimated for the transformed parameters `L mu`.
pub fn test_linear(
    hyp: &LinearHypothesis,
    mu_hat: &DVector<f64>,
    cov: &CovEstimate,
    alpha: f64,
) -> Result<EllipsoidTest> {
    if hyp.l.ncols() != cov.m() || mu_hat.len() != cov.m() {
        return Err(LmmError::Dimension { expected: cov.m(), got: hyp.l.ncols() });
    }
    let sigma_l = linalg::symmetrized(&(&hyp.l * &cov.sigma * hyp.l.transpose()));
    let diff = &hyp.l * (mu_hat - &hyp.a);
    let lambda = match cov.law {
        Law::Marginal => 0.0,
        Law::Conditional => {
            let inputs = cov.lambda_inputs.as_ref().ok_or_else(|| {
                LmmError::Argument("conditional tests need the data-based lambda inputs, not summaries only".into())
            })?;
            lambda_tilde(&inputs.transformed(&hyp.l), &sigma_l)?.max(0.0)
        }
    };
    ellipsoid_test(&diff, &sigma_l, lambda, cov.law, alpha)
}
