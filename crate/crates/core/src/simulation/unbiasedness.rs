use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::{Harness, SimConfig, SimEstimator};
use crate::covariance::Law;
use crate::error::{LmmError, Result};

const CHUNK: usize = 64;

/// Monte Carlo comparison of the covariance estimate with the empirical
/// covariance of `mu_hat - mu`: the raw second moment under the marginal law,
/// the covariance about the Monte Carlo mean under the conditional law.
#[derive(Debug, Clone)]
pub struct UnbiasednessReport {
    pub law: Law,
    pub reps: usize,
    pub valid: usize,
    pub empirical: DMatrix<f64>,
    pub mean_sigma: DMatrix<f64>,
    /// Standard error of `empirical - mean_sigma`, entrywise, from the paired
    /// per-rep differences.
    pub se: DMatrix<f64>,
}

impl UnbiasednessReport {
    pub fn z(&self) -> DMatrix<f64> {
        (&self.empirical - &self.mean_sigma).component_div(&self.se)
    }

    /// Entries on or above the diagonal with `|z| > limit`, and their total.
    pub fn exceedances(&self, limit: f64) -> (usize, usize) {
        let z = self.z();
        let m = z.nrows();
        let mut count = 0;
        for i in 0..m {
            for j in i..m {
                count += (z[(i, j)].abs() > limit) as usize;
            }
        }
        (count, m * (m + 1) / 2)
    }

    /// Mean of `empirical_ii / mean_sigma_ii`.
    pub fn mean_diagonal_ratio(&self) -> f64 {
        let m = self.empirical.nrows();
        (0..m).map(|i| self.empirical[(i, i)] / self.mean_sigma[(i, i)]).sum::<f64>() / m as f64
    }
}

struct Sums {
    s: DMatrix<f64>,
    s2: DMatrix<f64>,
    s_ee: DMatrix<f64>,
    /// `sum_r S_ij e_i`.
    s_e: DMatrix<f64>,
    errors: Vec<DVector<f64>>,
}

impl Sums {
    fn new(m: usize) -> Self {
        let z = DMatrix::zeros(m, m);
        Self { s: z.clone(), s2: z.clone(), s_ee: z.clone(), s_e: z, errors: Vec::new() }
    }

    fn add(&mut self, e: DVector<f64>, s: &DMatrix<f64>) {
        let ee = &e * e.transpose();
        self.s += s;
        self.s2 += s.component_mul(s);
        self.s_ee += s.component_mul(&ee);
        for j in 0..s.ncols() {
            for i in 0..s.nrows() {
                self.s_e[(i, j)] += s[(i, j)] * e[i];
            }
        }
        self.errors.push(e);
    }
}

pub fn run_unbiasedness(cfg: &SimConfig) -> Result<UnbiasednessReport> {
    let h = Harness::new(cfg)?;
    let m = h.m();
    let known_sigma = match cfg.law {
        Law::Marginal => h.known.marginal.sigma.clone(),
        Law::Conditional => h.known.conditional.sigma.clone(),
    };
    let one = |rep: usize| -> Option<(DVector<f64>, DMatrix<f64>)> {
        let data = h.draw(rep).ok()?;
        if cfg.estimator == SimEstimator::KnownDelta {
            let (mu_hat, _) = h.known.mu_hat(&data.ds, &h.tg);
            return Some((mu_hat - &data.mu, known_sigma.clone()));
        }
        let marginal = cfg.law == Law::Marginal;
        let e = h.estimate(&data.ds, marginal, !marginal).ok()?;
        let cov = if marginal { e.marginal } else { e.conditional }.expect("requested");
        Some((e.mu_hat - &data.mu, cov.sigma))
    };

    let mut sums = Sums::new(m);
    let mut start = 0;
    while start < cfg.reps {
        let end = (start + CHUNK).min(cfg.reps);
        let chunk: Vec<_> = (start..end).into_par_iter().map(one).collect();
        for (e, s) in chunk.into_iter().flatten() {
            sums.add(e, &s);
        }
        start = end;
    }
    let r = sums.errors.len();
    if r < 2 {
        return Err(LmmError::Numeric(format!("only {r} successful reps")));
    }
    let rf = r as f64;
    let centre = match cfg.law {
        Law::Marginal => DVector::zeros(m),
        Law::Conditional => sums.errors.iter().fold(DVector::zeros(m), |a, e| a + e) / rf,
    };
    let mut c_mean = DMatrix::zeros(m, m);
    let mut c2_mean = DMatrix::zeros(m, m);
    for e in &sums.errors {
        let c = e - &centre;
        let cc = &c * c.transpose();
        c2_mean += cc.component_mul(&cc);
        c_mean += cc;
    }
    c_mean /= rf;
    c2_mean /= rf;
    let s_mean = &sums.s / rf;
    let s2_mean = &sums.s2 / rf;
    // sum_r S_ij (e_i - c_i)(e_j - c_j), expanded through the accumulated sums.
    let sc_mean = DMatrix::from_fn(m, m, |i, j| {
        (sums.s_ee[(i, j)] - centre[j] * sums.s_e[(i, j)] - centre[i] * sums.s_e[(j, i)]
            + centre[i] * centre[j] * sums.s[(i, j)])
            / rf
    });
    let se = DMatrix::from_fn(m, m, |i, j| {
        let diff = c_mean[(i, j)] - s_mean[(i, j)];
        let var = c2_mean[(i, j)] - 2.0 * sc_mean[(i, j)] + s2_mean[(i, j)] - diff * diff;
        (var.max(0.0) / rf).sqrt()
    });
    let empirical = match cfg.law {
        Law::Marginal => c_mean,
        Law::Conditional => c_mean * (rf / (rf - 1.0)),
    };
    Ok(UnbiasednessReport { law: cfg.law, reps: cfg.reps, valid: r, empirical, mean_sigma: s_mean, se })
}
