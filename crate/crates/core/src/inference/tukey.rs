use nalgebra::DVector;
use serde::Serialize;

use super::check_alpha;
use crate::covariance::CovEstimate;
use crate::error::{LmmError, Result};
use crate::numerics::linalg;
use crate::numerics::range::{range_cdf, range_quantile};

#[derive(Debug, Clone, Serialize)]
pub struct ContrastTest {
    pub i: usize,
    pub j: usize,
    pub estimate: f64,
    /// Sum of the positive entries of `c' Sigma^{1/2}`.
    pub c_plus: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TukeyResult {
    pub contrasts: Vec<ContrastTest>,
    pub m_prime: usize,
    pub threshold: f64,
    pub any_reject: bool,
    pub warnings: Vec<String>,
}

impl TukeyResult {
    /// Record for the unordered pair `{i, j}`.
    pub fn pair(&self, i: usize, j: usize) -> Option<&ContrastTest> {
        self.contrasts.iter().find(|c| (c.i == i && c.j == j) || (c.i == j && c.j == i))
    }
}

/// `c_plus` for `c' = (row_i - row_j)` of the symmetric root.
pub(crate) fn c_plus(root: &nalgebra::DMatrix<f64>, i: usize, j: usize) -> f64 {
    root.row(i).iter().zip(root.row(j).iter()).map(|(a, b)| (a - b).max(0.0)).sum()
}

/// All simple contrasts `mu_i - mu_j` within `subset` (given in the order
/// used for the pairs, `i` before `j`), tested against the range quantile with
/// `m' = max(2, m - w + 1)` means.
pub fn tukey_all_pairs(mu_hat: &DVector<f64>, cov: &CovEstimate, subset: &[usize], alpha: f64) -> Result<TukeyResult> {
    check_alpha(alpha)?;
    let m = cov.m();
    if mu_hat.len() != m {
        return Err(LmmError::Dimension { expected: m, got: mu_hat.len() });
    }
    let w = subset.len();
    if w < 2 {
        return Err(LmmError::Argument(format!("pairwise comparisons need at least 2 clusters, got {w}")));
    }
    if let Some(bad) = subset.iter().find(|&&i| i >= m) {
        return Err(LmmError::Argument(format!("cluster index {bad} out of range (m = {m})")));
    }
    let mut warnings = Vec::new();
    let raw = m + 1 - w;
    let m_prime = raw.max(2);
    if raw < 2 {
        warnings.push(format!(
            "all {m} clusters compared: m' = {raw} is floored at 2; the classical Tukey procedure with {m} groups is the usual alternative"
        ));
    }
    let threshold = range_quantile(m_prime, 1.0 - alpha)?;
    let root = linalg::sym_sqrt(&cov.sigma)?.sqrt;
    let mut contrasts = Vec::with_capacity(w * (w - 1) / 2);
    for a in 0..w {
        for b in (a + 1)..w {
            let (i, j) = (subset[a], subset[b]);
            let estimate = mu_hat[i] - mu_hat[j];
            // c_plus is not invariant under swapping i and j, so use the canonical order.
            let cp = c_plus(&root, i.min(j), i.max(j));
            if cp <= 0.0 {
                return Err(LmmError::Numeric(format!("c_plus vanishes for pair ({i}, {j})")));
            }
            let statistic = estimate.abs() / cp;
            let p_value = (1.0 - range_cdf(statistic, m_prime)?).max(0.0);
            contrasts.push(ContrastTest {
                i,
                j,
                estimate,
                c_plus: cp,
                statistic,
                p_value,
                reject: statistic > threshold,
            });
        }
    }
    let any_reject = contrasts.iter().any(|c| c.reject);
    Ok(TukeyResult { contrasts, m_prime, threshold, any_reject, warnings })
}

/// Interval `c'mu_hat +- c_plus (eta + q_{m', 1-alpha})` for a contrast `c`.
pub fn tukey_interval(
    c: &DVector<f64>,
    mu_hat: &DVector<f64>,
    cov: &CovEstimate,
    alpha: f64,
    m_prime: usize,
    eta: f64,
) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    if c.len() != cov.m() || mu_hat.len() != cov.m() {
        return Err(LmmError::Dimension { expected: cov.m(), got: c.len() });
    }
    if !(eta >= 0.0) {
        return Err(LmmError::Argument(format!("eta must be >= 0, got {eta}")));
    }
    let root = linalg::sym_sqrt(&cov.sigma)?.sqrt;
    let cp: f64 = (c.transpose() * root).iter().map(|v| v.max(0.0)).sum();
    let q = range_quantile(m_prime, 1.0 - alpha)?;
    let centre = c.dot(mu_hat);
    let half = cp * (eta + q);
    Ok((centre - half, centre + half))
}
