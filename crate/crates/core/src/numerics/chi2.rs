//! Central and non-central chi-square distribution functions.
//!
//! The non-central CDF is the Poisson mixture
//! `sum_j Pois(j; lambda/2) F_{k+2j}(x)`, summed outward from the Poisson
//! mode with an explicit bound on the discarded tail.

use statrs::function::gamma::{gamma_lr, ln_gamma};

use super::roots::{bracket_upward, brent};
use crate::error::{LmmError, Result};

/// Truncation bound on the neglected Poisson-mixture mass.
pub const SERIES_TOL: f64 = 1e-14;
const MAX_HALF_LAMBDA: f64 = 1e9;

fn check_prob(prob: f64) -> Result<()> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(LmmError::Argument(format!("probability {prob} is not inside (0, 1)")));
    }
    Ok(())
}

fn check_df(df: f64) -> Result<()> {
    if !(df > 0.0 && df.is_finite()) {
        return Err(LmmError::Argument(format!("degrees of freedom {df} must be positive")));
    }
    Ok(())
}

pub fn chi2_cdf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    gamma_lr(0.5 * df, 0.5 * x)
}

/// Non-central chi-square CDF; `lambda = 0` takes the central path.
pub fn noncentral_chi2_cdf(x: f64, df: f64, lambda: f64) -> Result<f64> {
    check_df(df)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(LmmError::Argument(format!("non-centrality {lambda} must be finite and >= 0")));
    }
    if lambda == 0.0 {
        return Ok(chi2_cdf(x, df));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    let mu = 0.5 * lambda;
    if mu > MAX_HALF_LAMBDA {
        return Err(LmmError::Numeric(format!(
            "non-centrality {lambda:e} too large for the Poisson series (x = {x:e}, df = {df})"
        )));
    }
    let y = 0.5 * x;
    let ln_y = y.ln();
    let j0 = mu.floor();
    let w0 = (-mu + j0 * mu.ln() - ln_gamma(j0 + 1.0)).exp();
    let a0 = 0.5 * df + j0;
    let p0 = gamma_lr(a0, y);
    // y^a e^{-y} / Gamma(a + 1): P(a + 1, y) = P(a, y) - term(a)
    let term = |a: f64| (a * ln_y - y - ln_gamma(a + 1.0)).exp();

    let mut sum = w0 * p0;

    let (mut w, mut p, mut a, mut j) = (w0, p0, a0, j0);
    loop {
        p = (p - term(a)).max(0.0);
        a += 1.0;
        j += 1.0;
        w *= mu / j;
        sum += w * p;
        let r = mu / (j + 1.0);
        if r < 1.0 && p * w * r / (1.0 - r) < SERIES_TOL {
            break;
        }
        if w == 0.0 || p == 0.0 {
            break;
        }
        if j - j0 > 1e7 {
            return Err(LmmError::Numeric(format!(
                "Poisson series failed to converge (x = {x:e}, df = {df}, lambda = {lambda:e})"
            )));
        }
    }

    let (mut w, mut p, mut a, mut j) = (w0, p0, a0, j0);
    while j > 0.0 {
        // P(a - 1, y) = P(a, y) + term(a - 1)
        p = (p + term(a - 1.0)).min(1.0);
        a -= 1.0;
        w *= j / mu;
        j -= 1.0;
        sum += w * p;
        let s = j / mu;
        if s < 1.0 && w * s / (1.0 - s) < SERIES_TOL {
            break;
        }
    }
    Ok(sum.clamp(0.0, 1.0))
}

pub fn chi2_quantile(df: f64, prob: f64) -> Result<f64> {
    check_df(df)?;
    check_prob(prob)?;
    let f = |x: f64| Ok(chi2_cdf(x, df) - prob);
    let hi = bracket_upward(f, 0.0, df + 10.0 * (2.0 * df).sqrt() + 10.0)?;
    brent(f, 0.0, hi, 1e-13 * hi)
}

pub fn noncentral_chi2_quantile(df: f64, lambda: f64, prob: f64) -> Result<f64> {
    if lambda == 0.0 {
        return chi2_quantile(df, prob);
    }
    check_df(df)?;
    check_prob(prob)?;
    let f = |x: f64| Ok(noncentral_chi2_cdf(x, df, lambda)? - prob);
    let start = df + lambda + 10.0 * (2.0 * (df + 2.0 * lambda)).sqrt() + 10.0;
    let hi = bracket_upward(f, 0.0, start)?;
    brent(f, 0.0, hi, 1e-13 * hi)
}

/// Upper tail `1 - F(x)`.
pub fn noncentral_chi2_sf(x: f64, df: f64, lambda: f64) -> Result<f64> {
    Ok((1.0 - noncentral_chi2_cdf(x, df, lambda)?).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn central_table_values() {
        assert_relative_eq!(chi2_quantile(1.0, 0.95).unwrap(), 3.841_458_820_694_124, epsilon = 1e-9);
        assert_relative_eq!(chi2_quantile(2.0, 0.95).unwrap(), -2.0 * 0.05f64.ln(), epsilon = 1e-9);
        let med = chi2_quantile(200.0, 0.5).unwrap();
        assert!((med - (200.0 - 2.0 / 3.0)).abs() / 200.0 < 0.01);
    }

    #[test]
    fn lambda_zero_is_central() {
        for &p in &[0.01, 0.5, 0.95] {
            assert_eq!(noncentral_chi2_quantile(4.0, 0.0, p).unwrap(), chi2_quantile(4.0, p).unwrap());
        }
    }

    #[test]
    fn noncentral_reference_values() {
        // df = 2 has the closed form CDF 1 - Q_1(sqrt(lambda), sqrt(x)); the mean
        // of the non-central distribution is df + lambda
        let mean = crate::numerics::quad::integrate(|x| noncentral_chi2_sf(x, 3.0, 2.0).unwrap(), 0.0, 200.0, 1e-11);
        assert!((mean - 5.0).abs() < 1e-8, "mean {mean}");
        let var_part =
            crate::numerics::quad::integrate(|x| 2.0 * x * noncentral_chi2_sf(x, 3.0, 2.0).unwrap(), 0.0, 200.0, 1e-10);
        // E X^2 = var + mean^2 = 2(df + 2 lambda) + (df + lambda)^2
        assert!((var_part - (14.0 + 25.0)).abs() < 1e-7, "second moment {var_part}");
    }

    #[test]
    fn increasing_in_lambda() {
        let mut last = chi2_quantile(3.0, 0.95).unwrap();
        for &l in &[0.1, 1.0, 2.0, 10.0, 50.0, 300.0] {
            let q = noncentral_chi2_quantile(3.0, l, 0.95).unwrap();
            assert!(q > last);
            last = q;
        }
    }

    #[test]
    fn huge_lambda_is_numeric_error() {
        assert!(matches!(noncentral_chi2_cdf(1.0, 3.0, 1e12), Err(LmmError::Numeric(_))));
    }

    proptest! {
        #[test]
        fn quantile_inverts_cdf(df in 1u32..120, lambda in 0.0f64..200.0, pi in 0usize..5) {
            let p = [0.01, 0.05, 0.5, 0.95, 0.99][pi];
            let df = df as f64;
            let q = noncentral_chi2_quantile(df, lambda, p).unwrap();
            let c = noncentral_chi2_cdf(q, df, lambda).unwrap();
            prop_assert!((c - p).abs() < 1e-8);
            let qc = chi2_quantile(df, p).unwrap();
            prop_assert!((chi2_cdf(qc, df) - p).abs() < 1e-10);
        }
    }
}
