//! The matrix `A` with `E(mu_tilde - mu | v) = A Z v`, and the moment estimate
//! of the non-centrality `lambda = (A Z v)' Sigma_v^{-1} (A Z v)`.
//!
//! Row `i` of `A` is `a_i = E_i alpha_i + T d_i` with
//! `alpha_i = Z_i (Z_i'Z_i)^{-1} (Z_i'b_i - h_i)`, so that `a_i' Z v` equals the
//! error of `mu_tilde_i` in the random effects.

use nalgebra::{DMatrix, DVector};

use super::{CovContext, LambdaInputs};
use crate::error::{LmmError, Result};
use crate::model::{CovarianceStructure, LmmDataset, MixedTargets, VarianceParams};
use crate::numerics::linalg::{self, SpdMatrix};

#[derive(Debug, Clone)]
pub struct AMatrix {
    pub alpha: Vec<DVector<f64>>,
    pub b: Vec<DVector<f64>>,
    pub d: Vec<DVector<f64>>,
    t: Vec<DMatrix<f64>>,
    r: Vec<DMatrix<f64>>,
}

pub fn a_matrix(
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    targets: &MixedTargets,
    delta: &VarianceParams,
) -> Result<AMatrix> {
    let ctx = CovContext::new(dataset, structure, targets, delta)?;
    AMatrix::from_context(&ctx, dataset, targets)
}

impl AMatrix {
    pub fn from_context(ctx: &CovContext, dataset: &LmmDataset, targets: &MixedTargets) -> Result<Self> {
        let mut alpha = Vec::with_capacity(ctx.m());
        for ((blk, b), h) in dataset.blocks().iter().zip(&ctx.comp.b).zip(&targets.h) {
            let ztz = SpdMatrix::new(linalg::symmetrized(&(blk.z.transpose() * &blk.z)))
                .map_err(|_| LmmError::Rank(format!("Z_i'Z_i is singular in cluster {}", blk.id)))?;
            alpha.push(&blk.z * ztz.solve_vec(&(blk.z.transpose() * b - h)));
        }
        Ok(Self {
            alpha,
            b: ctx.comp.b.clone(),
            d: ctx.comp.d.clone(),
            t: ctx.state.blocks.iter().map(|bc| bc.t.clone()).collect(),
            r: ctx.state.blocks.iter().map(|bc| bc.r.clone()).collect(),
        })
    }

    pub fn m(&self) -> usize {
        self.alpha.len()
    }

    /// `A x` for a block-partitioned n-vector.
    pub fn apply(&self, x: &[DVector<f64>]) -> DVector<f64> {
        let mut tx = DVector::zeros(self.d[0].len());
        for (ti, xi) in self.t.iter().zip(x) {
            tx += ti.transpose() * xi;
        }
        DVector::from_fn(self.m(), |i, _| self.alpha[i].dot(&x[i]) + self.d[i].dot(&tx))
    }

    /// `(w_1'x, ..., w_m'x)` with `w_k = E_k b_k + T d_k`, so that `w_k'e` is
    /// the error of `mu_tilde_k` around its conditional mean.
    pub fn w_apply(&self, x: &[DVector<f64>]) -> DVector<f64> {
        let mut tx = DVector::zeros(self.d[0].len());
        for (ti, xi) in self.t.iter().zip(x) {
            tx += ti.transpose() * xi;
        }
        DVector::from_fn(self.m(), |i, _| self.b[i].dot(&x[i]) + self.d[i].dot(&tx))
    }

    /// `A R A'`.
    pub fn a_r_at(&self) -> DMatrix<f64> {
        let p = self.d[0].len();
        let m = self.m();
        let mut s = DMatrix::zeros(p, p);
        let mut c = DMatrix::zeros(p, m);
        let mut diag = DVector::zeros(m);
        for (i, ((ti, ri), ai)) in self.t.iter().zip(&self.r).zip(&self.alpha).enumerate() {
            let rt = ri * ti;
            s += ti.transpose() * &rt;
            c.set_column(i, &(rt.transpose() * ai));
            diag[i] = ai.dot(&(ri * ai));
        }
        let d = DMatrix::from_columns(&self.d);
        let dtc = d.transpose() * &c;
        linalg::symmetrized(&(DMatrix::from_diagonal(&diag) + &dtc + dtc.transpose() + d.transpose() * s * &d))
    }

    /// `A X beta`; uses `T'X = I`.
    pub fn a_x_beta(&self, dataset: &LmmDataset, beta: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.m(), |i, _| self.alpha[i].dot(&(&dataset.block(i).x * beta)) + self.d[i].dot(beta))
    }

    pub fn lambda_inputs(&self, dataset: &LmmDataset, beta: &DVector<f64>) -> LambdaInputs {
        let y: Vec<DVector<f64>> = dataset.blocks().iter().map(|b| b.y.clone()).collect();
        LambdaInputs { a_y: self.apply(&y), a_r_at: self.a_r_at(), a_x_beta: self.a_x_beta(dataset, beta) }
    }

    /// `A Z v` for per-cluster random effects `v_i`.
    pub fn a_z_v(&self, dataset: &LmmDataset, v: &[DVector<f64>]) -> DVector<f64> {
        let zv: Vec<DVector<f64>> = dataset.blocks().iter().zip(v).map(|(b, vi)| &b.z * vi).collect();
        self.apply(&zv)
    }

    /// Dense m x n matrix, for checks on small problems.
    pub fn dense(&self) -> DMatrix<f64> {
        let n: usize = self.t.iter().map(|t| t.nrows()).sum();
        let mut out = DMatrix::zeros(self.m(), n);
        for i in 0..self.m() {
            let mut o = 0;
            for (k, tk) in self.t.iter().enumerate() {
                let mut row = tk * &self.d[i];
                if k == i {
                    row += &self.alpha[i];
                }
                out.view_mut((i, o), (1, tk.nrows())).copy_from(&row.transpose());
                o += tk.nrows();
            }
        }
        out
    }
}

/// `lambda_tilde = (Ay)'S^{-1}(Ay) - tr(S^{-1} A R A') - (AX beta)'S^{-1}(AX beta)`.
pub fn lambda_tilde(inputs: &LambdaInputs, sigma: &DMatrix<f64>) -> Result<f64> {
    let chol = SpdMatrix::new(linalg::symmetrized(sigma))?;
    let tr = chol.solve(&inputs.a_r_at).trace();
    Ok(chol.inv_quad_form(&inputs.a_y) - tr - chol.inv_quad_form(&inputs.a_x_beta))
}

/// `max(0, lambda_tilde)` at the `beta` and `delta` that built `a`.
pub fn lambda_hat(sigma: &DMatrix<f64>, a: &AMatrix, dataset: &LmmDataset, beta: &DVector<f64>) -> Result<f64> {
    Ok(lambda_tilde(&a.lambda_inputs(dataset, beta), sigma)?.max(0.0))
}

/// True non-centrality `(AZv)' Sigma^{-1} (AZv)`.
pub fn oracle_lambda(sigma: &DMatrix<f64>, a: &AMatrix, dataset: &LmmDataset, v: &[DVector<f64>]) -> Result<f64> {
    let bias = a.a_z_v(dataset, v);
    Ok(SpdMatrix::new(linalg::symmetrized(sigma))?.inv_quad_form(&bias))
}
