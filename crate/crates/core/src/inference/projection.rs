use nalgebra::{DMatrix, DVector};

use super::ellipsoid::{test_linear, EllipsoidTest, LinearHypothesis};
use crate::covariance::CovEstimate;
use crate::error::{LmmError, Result};

#[derive(Debug, Clone)]
pub struct Projection {
    pub test: EllipsoidTest,
    /// `t = L (mu_hat - a)`.
    pub t: DVector<f64>,
    /// Radially shrunk contrasts on the boundary of the acceptance region.
    pub t_star: DVector<f64>,
    pub moved: bool,
    /// Per designated coordinate: the change of `mu_hat` that realises `t_star`.
    pub coordinate_deltas: Option<Vec<(usize, f64)>>,
    pub mu_star: Option<DVector<f64>>,
    pub attribution_error: Option<String>,
}

/// Shrinks a rejected contrast vector onto the boundary of the acceptance
/// region along the ray to the hypothesis, `t* = t sqrt(threshold/statistic)`.
///
/// Row `r` is attributed to coordinate `designated[r]`: the designated entries
/// of `mu_hat` are moved so that `L (mu* - a) = t*` exactly.
pub fn project_onto_ellipsoid(
    hyp: &LinearHypothesis,
    mu_hat: &DVector<f64>,
    cov: &CovEstimate,
    alpha: f64,
    designated: &[usize],
) -> Result<Projection> {
    let test = test_linear(hyp, mu_hat, cov, alpha)?;
    let t = &hyp.l * (mu_hat - &hyp.a);
    if !test.reject {
        return Ok(Projection {
            test,
            t_star: t.clone(),
            t,
            moved: false,
            coordinate_deltas: Some(Vec::new()),
            mu_star: Some(mu_hat.clone()),
            attribution_error: None,
        });
    }
    let t_star = &t * (test.threshold / test.statistic).sqrt();
    let shift = &t - &t_star;
    let u = hyp.u();
    let attribution = (|| -> Result<(Vec<(usize, f64)>, DVector<f64>)> {
        if designated.len() != u {
            return Err(LmmError::Argument(format!(
                "one designated coordinate per contrast row is required ({u} rows, {} given)",
                designated.len()
            )));
        }
        if let Some(bad) = designated.iter().find(|&&c| c >= mu_hat.len()) {
            return Err(LmmError::Argument(format!("designated coordinate {bad} out of range")));
        }
        let sub = DMatrix::from_fn(u, u, |r, k| hyp.l[(r, designated[k])]);
        let delta = sub
            .lu()
            .solve(&shift)
            .ok_or_else(|| LmmError::Rank("designated columns of L are linearly dependent".into()))?;
        let mut mu_star = mu_hat.clone();
        let mut deltas = Vec::with_capacity(u);
        for (k, &c) in designated.iter().enumerate() {
            mu_star[c] -= delta[k];
            deltas.push((c, -delta[k]));
        }
        Ok((deltas, mu_star))
    })();
    let (coordinate_deltas, mu_star, attribution_error) = match attribution {
        Ok((d, m)) => (Some(d), Some(m), None),
        Err(e) => (None, None, Some(e.to_string())),
    };
    Ok(Projection { test, t, t_star, moved: true, coordinate_deltas, mu_star, attribution_error })
}
