//! Distribution of the range of `m` iid standard normal variables.

use libm::erfc;
use statrs::distribution::{ContinuousCDF, Normal};

use super::quad::integrate;
use super::roots::{bracket_upward, brent};
use crate::error::{LmmError, Result};

const LIMIT: f64 = 9.0;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(LmmError::Argument(format!("probability {p} is not inside (0, 1)")));
    }
    Ok(Normal::standard().inverse_cdf(p))
}

// P(z - q < Z <= z) computed from whichever tail avoids cancellation
fn window(z: f64, q: f64) -> f64 {
    if z - 0.5 * q > 0.0 {
        normal_sf(z - q) - normal_sf(z)
    } else {
        normal_cdf(z) - normal_cdf(z - q)
    }
}

/// `P(max Z - min Z <= q)` for `m` iid standard normals.
pub fn range_cdf(q: f64, m: usize) -> Result<f64> {
    if m < 2 {
        return Err(LmmError::Argument(format!("range distribution needs m >= 2, got {m}")));
    }
    if q <= 0.0 {
        return Ok(0.0);
    }
    if q.is_infinite() {
        return Ok(1.0);
    }
    let k = (m - 1) as i32;
    let mf = m as f64;
    let v = integrate(|z| mf * normal_pdf(z) * window(z, q).powi(k), -LIMIT, LIMIT, 1e-13);
    Ok(v.clamp(0.0, 1.0))
}

pub fn range_quantile(m: usize, prob: f64) -> Result<f64> {
    if m < 2 {
        return Err(LmmError::Argument(format!("range distribution needs m >= 2, got {m}")));
    }
    if !(prob > 0.0 && prob < 1.0) {
        return Err(LmmError::Argument(format!("probability {prob} is not inside (0, 1)")));
    }
    let f = |q: f64| Ok(range_cdf(q, m)? - prob);
    let hi = bracket_upward(f, 0.0, 8.0)?;
    brent(f, 0.0, hi, 1e-10)
}
