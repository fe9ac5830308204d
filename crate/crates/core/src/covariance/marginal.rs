use nalgebra::{DMatrix, DVector};

use super::{CovContext, CovEstimate, Law};
use crate::error::{LmmError, Result};
use crate::estimation::VarianceFit;
use crate::model::{CovarianceStructure, LmmDataset, MixedTargets};
use crate::numerics::linalg;

/// `(K_1)_ii = h_i'(G - G Z_i' V_i^{-1} Z_i G) h_i`.
pub fn k1(ctx: &CovContext, dataset: &LmmDataset, targets: &MixedTargets) -> DVector<f64> {
    let g = &ctx.state.g;
    DVector::from_iterator(
        ctx.m(),
        dataset.blocks().iter().zip(&targets.h).zip(&ctx.comp.b).map(|((blk, h), b)| {
            let gh = g * h;
            h.dot(&gh) - (&blk.z * gh).dot(b)
        }),
    )
}

/// `(K_2)_ik = d_i' (X'V^{-1}X)^{-1} d_k`.
pub fn k2(ctx: &CovContext) -> DMatrix<f64> {
    let d = ctx.d_matrix();
    linalg::symmetrized(&(d.transpose() * &ctx.state.f * d))
}

/// `tr(B' M B vbar)` with `B = db_i`.
pub(crate) fn derivative_trace(db: &DMatrix<f64>, m: &DMatrix<f64>, vbar: &DMatrix<f64>) -> f64 {
    (db.transpose() * m * db).component_mul(vbar).sum()
}

/// `(K3_hat)_ii = tr{(db_i/d delta)' V_i (db_i/d delta) vbar}`.
pub fn k3_hat(ctx: &CovContext, dataset: &LmmDataset, vbar: &DMatrix<f64>) -> DVector<f64> {
    let g = &ctx.state.g;
    DVector::from_iterator(
        ctx.m(),
        dataset.blocks().iter().zip(&ctx.state.blocks).zip(&ctx.comp.db).map(|((blk, bc), db)| {
            let v = &bc.r + &blk.z * g * blk.z.transpose();
            derivative_trace(db, &v, vbar)
        }),
    )
}

/// `Sigma_hat = K_1 + K_2 + 2 K3_hat`; with known variance components the
/// correction vanishes because `vbar = 0`.
pub fn sigma_marginal(
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    targets: &MixedTargets,
    fit: &VarianceFit,
) -> Result<CovEstimate> {
    let ctx = CovContext::new(dataset, structure, targets, &fit.delta_hat)?;
    marginal_from_context(&ctx, dataset, targets, fit)
}

pub(crate) fn marginal_from_context(
    ctx: &CovContext,
    dataset: &LmmDataset,
    targets: &MixedTargets,
    fit: &VarianceFit,
) -> Result<CovEstimate> {
    let r = ctx.state.n_params();
    if fit.vbar.nrows() != r || fit.vbar.ncols() != r {
        return Err(LmmError::Dimension { expected: r, got: fit.vbar.nrows() });
    }
    let k1 = DMatrix::from_diagonal(&k1(ctx, dataset, targets));
    let k2 = k2(ctx);
    let k3 = DMatrix::from_diagonal(&k3_hat(ctx, dataset, &fit.vbar)) * 2.0;
    CovEstimate::assemble(
        vec![("k1".into(), k1), ("k2".into(), k2), ("2k3".into(), k3)],
        Law::Marginal,
        &fit.delta_hat,
        fit.method,
    )
}
