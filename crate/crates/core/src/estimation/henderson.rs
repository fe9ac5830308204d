//! Henderson III moment estimator for the nested error regression model.
//!
//! With `M = (X, Z)` and cluster indicators `Z`, projecting on `M` is the
//! cluster-mean projection plus the projection on the within-cluster demeaned
//! design, so both quadratic forms are applied without n x n matrices:
//!
//! * `C_2 = (I - P_M) / (n - p - m)` estimates `sigma_e^2`;
//! * `C_1 = (I - P_X - (n - p) C_2) / tau` with `tau = tr{Z'(I - P_X)Z}` estimates `sigma_v^2`.

use nalgebra::{DMatrix, DVector};

use super::state::BlockState;
use super::{EstimationMethod, VarianceFit};
use crate::error::{LmmError, Result};
use crate::model::{LmmDataset, NestedErrorStructure, VarianceParams};
use crate::numerics::linalg::{self, SpdMatrix};

/// Matrix-free appliers for `C_1` (`sigma_v^2`) and `C_2` (`sigma_e^2`).
#[derive(Debug, Clone)]
pub struct HendersonOperators {
    sizes: Vec<usize>,
    x: DMatrix<f64>,
    xtx_inv: DMatrix<f64>,
    /// Demeaned design and the inverse of its Gram matrix.
    xw: DMatrix<f64>,
    xwtxw_inv: DMatrix<f64>,
    n: usize,
    p: usize,
    m: usize,
    tau: f64,
}

fn check_ner_design(dataset: &LmmDataset) -> Result<()> {
    if dataset.q() != 1 || dataset.blocks().iter().any(|b| b.z.iter().any(|v| *v != 1.0)) {
        return Err(LmmError::Structural("Henderson III is implemented for Z_i = 1 (nested error model) only".into()));
    }
    Ok(())
}

pub fn extract_ce(dataset: &LmmDataset) -> Result<HendersonOperators> {
    check_ner_design(dataset)?;
    let (n, p, m) = (dataset.n(), dataset.p(), dataset.m());
    if n <= p + m {
        return Err(LmmError::Rank(format!(
            "Henderson III needs n > p + m (n = {n}, p = {p}, m = {m}); use REML instead"
        )));
    }
    let x = dataset.stacked_x();
    let sizes = dataset.cluster_sizes();
    let xw = demean(&x, &sizes);
    let gram_w = xw.transpose() * &xw;
    if let Some(cols) = linalg::collinear_columns(&gram_w) {
        return Err(LmmError::Rank(format!(
            "rank(X, Z) < p + m: columns {cols:?} of X are constant within clusters (an intercept, \
             for example); remove the intercept or use REML"
        )));
    }
    let xwtxw_inv = SpdMatrix::new(linalg::symmetrized(&gram_w))?.inverse();
    let xtx_inv = SpdMatrix::new(linalg::symmetrized(&(x.transpose() * &x)))?.inverse();
    // tau = n - sum_i (1'X_i)(X'X)^{-1}(X_i'1)
    let mut tau = n as f64;
    for b in dataset.blocks() {
        let s = DVector::from_iterator(p, b.x.column_iter().map(|c| c.sum()));
        tau -= s.dot(&(&xtx_inv * &s));
    }
    Ok(HendersonOperators { sizes, x, xtx_inv, xw, xwtxw_inv, n, p, m, tau })
}

fn demean(x: &DMatrix<f64>, sizes: &[usize]) -> DMatrix<f64> {
    let mut out = x.clone();
    let mut o = 0;
    for &s in sizes {
        for c in 0..x.ncols() {
            let mean = x.view((o, c), (s, 1)).sum() / s as f64;
            for r in o..o + s {
                out[(r, c)] -= mean;
            }
        }
        o += s;
    }
    out
}

impl HendersonOperators {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    fn resid_m(&self, v: &DVector<f64>) -> DVector<f64> {
        let vw = demean(&DMatrix::from_column_slice(self.n, 1, v.as_slice()), &self.sizes).column(0).into_owned();
        let coef = &self.xwtxw_inv * (self.xw.transpose() * &vw);
        vw - &self.xw * coef
    }

    fn resid_x(&self, v: &DVector<f64>) -> DVector<f64> {
        v - &self.x * (&self.xtx_inv * (self.x.transpose() * v))
    }

    pub fn apply_c2(&self, v: &DVector<f64>) -> DVector<f64> {
        self.resid_m(v) / (self.n - self.p - self.m) as f64
    }

    pub fn apply_c1(&self, v: &DVector<f64>) -> DVector<f64> {
        (self.resid_x(v) - self.apply_c2(v) * (self.n - self.p) as f64) / self.tau
    }

    /// `C_e v` with `e = 0` for `sigma_v^2` and `e = 1` for `sigma_e^2`.
    pub fn apply(&self, e: usize, v: &DVector<f64>) -> DVector<f64> {
        if e == 0 {
            self.apply_c1(v)
        } else {
            self.apply_c2(v)
        }
    }

    /// `tr(C_e C_f)` in closed form.
    pub fn trace_product(&self, e: usize, f: usize) -> f64 {
        let (n, p, m) = (self.n as f64, self.p as f64, self.m as f64);
        let k = n - p - m;
        match (e, f) {
            (1, 1) => 1.0 / k,
            (0, 1) | (1, 0) => -m / (k * self.tau),
            _ => (n - p) * m / (k * self.tau * self.tau),
        }
    }

    /// Untruncated `(y'C_1y, y'C_2y)`.
    pub fn quadratic_forms(&self, y: &DVector<f64>) -> (f64, f64) {
        (y.dot(&self.apply_c1(y)), y.dot(&self.apply_c2(y)))
    }
}

pub fn fit_henderson3_ner(dataset: &LmmDataset) -> Result<VarianceFit> {
    let ops = extract_ce(dataset)?;
    let y = dataset.stacked_y();
    let (sv_raw, se) = ops.quadratic_forms(&y);
    let mut warnings = Vec::new();
    if se <= 0.0 {
        return Err(LmmError::Degenerate {
            block: String::new(),
            detail: "Henderson III error variance is zero (data lie in the span of (X, Z))".into(),
        });
    }
    let truncated = sv_raw < 0.0;
    if truncated {
        warnings.push(format!("negative sigma_v^2 estimate {sv_raw:e} truncated at 0"));
    }
    let delta = VarianceParams::new(vec![sv_raw.max(0.0), se])?;
    let st = BlockState::new(dataset, &NestedErrorStructure, &delta)?;

    // plug-in mean mu = X beta + Z v_hat with v_hat_i = sigma_v^2 1'P_i y
    let sv = delta.get(0);
    let mut mu = DVector::zeros(dataset.n());
    for (i, (b, bc)) in dataset.blocks().iter().zip(&st.blocks).enumerate() {
        let vhat = sv * bc.py.sum();
        let o = dataset.offset(i);
        mu.rows_mut(o, b.n()).copy_from(&(&b.x * &st.beta).add_scalar(vhat));
    }
    let cmu = [ops.apply_c1(&mu), ops.apply_c2(&mu)];
    let vbar = DMatrix::from_fn(2, 2, |e, f| 2.0 * se * se * ops.trace_product(e, f) + 4.0 * se * cmu[e].dot(&cmu[f]));
    Ok(VarianceFit {
        delta_hat: delta,
        beta_hat: st.beta,
        vbar: linalg::symmetrized(&vbar),
        method: EstimationMethod::Henderson3,
        iterations: 0,
        converged: true,
        boundary_flags: vec![truncated, false],
        raw_delta: vec![sv_raw, se],
        loglik: None,
        warnings,
    })
}
