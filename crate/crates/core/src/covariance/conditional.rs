//! Conditional-law covariance of `mu_hat - mu` given `v`, estimated by the
//! symmetric part of `L_1 + L_2 + L3_hat + L4_hat - L5_hat`.
//!
//! The EBLUP error is linear in `y` through the vectors
//! `w_k = E_k b_k + T d_k` (cluster `k` block `b_k`, plus `T d_k` spread over
//! all clusters), and every term is built from `w_k`, its delta-derivatives and
//! block-diagonal operators, so nothing n x n is formed.

use nalgebra::{DMatrix, DVector};

use super::amatrix::AMatrix;
use super::marginal::derivative_trace;
use super::{CovContext, CovEstimate, Law};
use crate::error::{LmmError, Result};
use crate::estimation::state::{fisher_derivative_from_state, fisher_from_state};
use crate::estimation::{extract_ce, EstimationMethod, HendersonOperators, VarianceFit};
use crate::model::{CovarianceStructure, LmmDataset, MixedTargets};
use crate::numerics::linalg;

type Blocks = Vec<DVector<f64>>;

/// `(L_1)_ii = b_i' R_i b_i`.
pub fn l1(ctx: &CovContext) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        ctx.m(),
        ctx.comp.b.iter().zip(&ctx.state.blocks).map(|(b, bc)| b.dot(&(&bc.r * b))),
    ))
}

/// `(L_2)_ik = d_i'c_k + c_i'd_k + d_i' S d_k` with `c_i = T_i'R_i b_i` and
/// `S = T'RT`.
pub fn l2(ctx: &CovContext) -> DMatrix<f64> {
    let p = ctx.state.f.nrows();
    let mut s = DMatrix::zeros(p, p);
    let mut c = DMatrix::zeros(p, ctx.m());
    for (i, (bc, b)) in ctx.state.blocks.iter().zip(&ctx.comp.b).enumerate() {
        let rt = &bc.r * &bc.t;
        s += bc.t.transpose() * &rt;
        c.set_column(i, &(rt.transpose() * b));
    }
    let d = ctx.d_matrix();
    let dtc = d.transpose() * &c;
    linalg::symmetrized(&(&dtc + dtc.transpose() + d.transpose() * s * &d))
}

/// `(L4_hat)_ii = tr{(db_i/d delta)' R_i (db_i/d delta) vbar}`.
pub fn l4_hat(ctx: &CovContext, vbar: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_iterator(
        ctx.m(),
        ctx.comp.db.iter().zip(&ctx.state.blocks).map(|(db, bc)| derivative_trace(db, &bc.r, vbar)),
    ))
}

/// `(L5_hat)_ii = sum_{e,g} H_eg vbar_ge / 2` where `H_eg` is the second
/// delta-derivative of `b_i' R_i b_i`.
pub fn l5_hat(ctx: &CovContext, vbar: &DMatrix<f64>) -> DMatrix<f64> {
    let r = ctx.state.n_params();
    DMatrix::from_diagonal(&DVector::from_fn(ctx.m(), |i, _| {
        let bc = &ctx.state.blocks[i];
        let b = &ctx.comp.b[i];
        let db = &ctx.comp.db[i];
        let mut acc = 0.0;
        for e in 0..r {
            for g in 0..r {
                let de = db.column(e);
                let dg = db.column(g);
                let d2 = ctx.comp.second_derivative(&ctx.state, i, e, g);
                let h = 2.0 * dg.dot(&(&bc.r * de))
                    + 2.0 * b.dot(&(&bc.dr[g] * de))
                    + 2.0 * b.dot(&(&bc.dr[e] * dg))
                    + 2.0 * b.dot(&(&bc.r * d2));
                acc += h * vbar[(g, e)];
            }
        }
        0.5 * acc
    }))
}

/// First and second delta-derivatives of the blocks of `T = W X F`.
#[derive(Debug, Clone)]
pub struct WDerivatives {
    /// `[e][i]`: `dT_i / d delta_e`.
    pub dt: Vec<Vec<DMatrix<f64>>>,
    /// `[e][g][i]`: `d^2 T_i / d delta_e d delta_g`.
    pub d2t: Vec<Vec<Vec<DMatrix<f64>>>>,
}

impl WDerivatives {
    /// Uses `dT = -W D_e T + T Q_e` with `Q_e = U' D_e T`, and differentiates
    /// once more (`dW = -W D W`, structures linear in delta).
    pub fn new(ctx: &CovContext) -> Self {
        let st = &ctx.state;
        let r = st.n_params();
        let q: Vec<DMatrix<f64>> =
            (0..r).map(|e| st.blocks.iter().map(|bc| bc.u.transpose() * &bc.dv[e] * &bc.t).sum()).collect();
        let dt: Vec<Vec<DMatrix<f64>>> = (0..r)
            .map(|e| st.blocks.iter().map(|bc| -(&bc.w * (&bc.dv[e] * &bc.t)) + &bc.t * &q[e]).collect())
            .collect();
        let mut d2t = vec![vec![Vec::new(); r]; r];
        for e in 0..r {
            for g in 0..r {
                // d Q_e / d delta_g
                let mut dq = DMatrix::zeros(q[e].nrows(), q[e].ncols());
                for (i, bc) in st.blocks.iter().enumerate() {
                    let wdet = &bc.w * (&bc.dv[e] * &bc.t);
                    dq += -(bc.u.transpose() * (&bc.dv[g] * &wdet)) + bc.u.transpose() * (&bc.dv[e] * &dt[g][i]);
                }
                d2t[e][g] = st
                    .blocks
                    .iter()
                    .enumerate()
                    .map(|(i, bc)| {
                        let wdet = &bc.w * (&bc.dv[e] * &bc.t);
                        &bc.w * (&bc.dv[g] * wdet) - &bc.w * (&bc.dv[e] * &dt[g][i]) + &dt[g][i] * &q[e] + &bc.t * &dq
                    })
                    .collect();
            }
        }
        Self { dt, d2t }
    }

    /// `w_k` as per-cluster blocks.
    pub fn w(&self, ctx: &CovContext, k: usize) -> Blocks {
        let mut out: Blocks = ctx.state.blocks.iter().map(|bc| &bc.t * &ctx.comp.d[k]).collect();
        out[k] += &ctx.comp.b[k];
        out
    }

    /// `d w_k / d delta_e`.
    pub fn dw(&self, ctx: &CovContext, dataset: &LmmDataset, k: usize, e: usize) -> Blocks {
        let dbk = ctx.comp.db[k].column(e).into_owned();
        let ddk = -(dataset.block(k).x.transpose() * &dbk);
        let dk = &ctx.comp.d[k];
        let mut out: Blocks =
            ctx.state.blocks.iter().zip(&self.dt[e]).map(|(bc, dti)| dti * dk + &bc.t * &ddk).collect();
        out[k] += dbk;
        out
    }

    /// `d^2 w_k / d delta_e d delta_g`.
    pub fn d2w(&self, ctx: &CovContext, dataset: &LmmDataset, k: usize, e: usize, g: usize) -> Blocks {
        let xk = &dataset.block(k).x;
        let db = &ctx.comp.db[k];
        let d2b = ctx.comp.second_derivative(&ctx.state, k, e, g);
        let dde = -(xk.transpose() * db.column(e));
        let ddg = -(xk.transpose() * db.column(g));
        let d2d = -(xk.transpose() * &d2b);
        let dk = &ctx.comp.d[k];
        let mut out: Blocks = (0..ctx.m())
            .map(|i| {
                &self.d2t[e][g][i] * dk + &self.dt[e][i] * &ddg + &self.dt[g][i] * &dde + &ctx.state.blocks[i].t * &d2d
            })
            .collect();
        out[k] += d2b;
        out
    }
}

fn apply_r(ctx: &CovContext, x: &[DVector<f64>]) -> Blocks {
    ctx.state.blocks.iter().zip(x).map(|(bc, xi)| &bc.r * xi).collect()
}

fn axpy(acc: &mut Blocks, a: f64, x: &[DVector<f64>]) {
    if a != 0.0 {
        for (ai, xi) in acc.iter_mut().zip(x) {
            ai.axpy(a, xi, 1.0);
        }
    }
}

fn zeros_like(ctx: &CovContext) -> Blocks {
    ctx.state.blocks.iter().map(|bc| DVector::zeros(bc.r.nrows())).collect()
}

/// `L3[i, k] = w_i' y_k` using the block structure of `w_i`.
fn l3_from_columns(ctx: &CovContext, cols: &[Blocks]) -> DMatrix<f64> {
    let m = ctx.m();
    let mut out = DMatrix::zeros(m, m);
    for (k, yk) in cols.iter().enumerate() {
        let ty = ctx.state.t_transpose_apply(yk);
        for i in 0..m {
            out[(i, k)] = ctx.comp.b[i].dot(&yk[i]) + ctx.comp.d[i].dot(&ty);
        }
    }
    out
}

/// REML form of `L3_hat`, obtained from the bias of the REML estimator and the
/// derivative of its asymptotic covariance; `vbar` is the inverse expected
/// information.
pub fn l3_hat_reml(ctx: &CovContext, dataset: &LmmDataset, vbar: &DMatrix<f64>) -> DMatrix<f64> {
    let st = &ctx.state;
    let r = st.n_params();
    let info = fisher_from_state(st);
    let dinfo: Vec<DMatrix<f64>> = (0..r).map(|g| fisher_derivative_from_state(st, g)).collect();
    let vbar2 = vbar * vbar;
    let c: Vec<f64> = (0..r).map(|e| vbar2.row(e).sum()).collect();
    let s: Vec<f64> = (0..r).map(|e| vbar.row(e).sum()).collect();
    let kappa: Vec<f64> =
        (0..r).map(|e| (0..r).map(|d| (0..r).map(|g| dinfo[g][(e, d)]).sum::<f64>() * vbar[(e, d)]).sum()).collect();
    // gamma[e][d] = vbar dinfo[e] vbar[:, d]
    let gamma: Vec<Vec<DVector<f64>>> = (0..r)
        .map(|e| {
            let core = vbar * &dinfo[e];
            (0..r).map(|d| &core * vbar.column(d)).collect()
        })
        .collect();
    let derivs = WDerivatives::new(ctx);

    let cols: Vec<Blocks> = (0..ctx.m())
        .map(|k| {
            let dws: Vec<Blocks> = (0..r).map(|f| derivs.dw(ctx, dataset, k, f)).collect();
            let combo = |coef: &dyn Fn(usize) -> f64| {
                let mut acc = zeros_like(ctx);
                for (f, dwf) in dws.iter().enumerate() {
                    axpy(&mut acc, coef(f), dwf);
                }
                acc
            };
            let u: Vec<Blocks> = (0..r).map(|e| combo(&|f| vbar[(f, e)])).collect();

            // 2 sum_e R P D_e P R u_e
            let mut yk = zeros_like(ctx);
            for (e, ue) in u.iter().enumerate() {
                let pru = st.apply_p(&apply_r(ctx, ue));
                let dpru: Blocks = st.blocks.iter().zip(&pru).map(|(bc, x)| &bc.dv[e] * x).collect();
                axpy(&mut yk, 2.0, &apply_r(ctx, &st.apply_p(&dpru)));
            }

            // the remaining terms share the leading R
            let mut inner = zeros_like(ctx);
            for e in 0..r {
                for d in 0..r {
                    let a = 4.0 * c[e] * info[(e, d)];
                    if a != 0.0 {
                        axpy(&mut inner, a, &derivs.d2w(ctx, dataset, k, e, d));
                    }
                    let z = combo(&|f| gamma[e][d][f]);
                    axpy(&mut inner, -2.0 * s[e] * info[(e, d)], &z);
                }
                axpy(&mut inner, 2.0 * kappa[e], &u[e]);
            }
            axpy(&mut yk, 1.0, &apply_r(ctx, &inner));
            yk
        })
        .collect();
    l3_from_columns(ctx, &cols)
}

/// Henderson III form of `L3_hat` for the nested error model, where `C_e` are
/// the quadratic-form matrices of the moment estimator.
pub fn l3_hat_h3(
    ctx: &CovContext,
    dataset: &LmmDataset,
    ops: &HendersonOperators,
    vbar: &DMatrix<f64>,
) -> DMatrix<f64> {
    let r = ctx.state.n_params();
    let derivs = WDerivatives::new(ctx);
    let sizes = dataset.cluster_sizes();
    let stack = |x: &[DVector<f64>]| DVector::from_iterator(dataset.n(), x.iter().flat_map(|v| v.iter().copied()));
    let unstack = |v: &DVector<f64>| -> Blocks {
        let mut o = 0;
        sizes
            .iter()
            .map(|&s| {
                let b = v.rows(o, s).into_owned();
                o += s;
                b
            })
            .collect()
    };
    let cols: Vec<Blocks> = (0..ctx.m())
        .map(|k| {
            let mut inner = zeros_like(ctx);
            for e in 0..r {
                let dwe = derivs.dw(ctx, dataset, k, e);
                let crdw = unstack(&ops.apply(e, &stack(&apply_r(ctx, &dwe))));
                axpy(&mut inner, 2.0, &crdw);
                for g in 0..r {
                    if vbar[(e, g)] != 0.0 {
                        axpy(&mut inner, vbar[(e, g)], &derivs.d2w(ctx, dataset, k, e, g));
                    }
                }
            }
            apply_r(ctx, &inner)
        })
        .collect();
    l3_from_columns(ctx, &cols)
}

/// Conditional covariance estimate at the fitted variance components, with
/// the non-centrality estimate `lambda_hat` attached.
pub fn sigma_conditional(
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    targets: &MixedTargets,
    fit: &VarianceFit,
) -> Result<CovEstimate> {
    let ctx = CovContext::new(dataset, structure, targets, &fit.delta_hat)?;
    conditional_from_context(&ctx, dataset, structure, targets, fit)
}

pub(crate) fn conditional_from_context(
    ctx: &CovContext,
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    targets: &MixedTargets,
    fit: &VarianceFit,
) -> Result<CovEstimate> {
    let r = ctx.state.n_params();
    if fit.vbar.nrows() != r || fit.vbar.ncols() != r {
        return Err(LmmError::Dimension { expected: r, got: fit.vbar.nrows() });
    }
    let mut components = vec![("l1".to_string(), l1(ctx)), ("l2".to_string(), l2(ctx))];
    if fit.method != EstimationMethod::Known {
        if !structure.linear_in_delta() {
            return Err(LmmError::Structural(
                "conditional covariance correction needs a structure linear in delta".into(),
            ));
        }
        let l3 = match fit.method {
            EstimationMethod::Reml => l3_hat_reml(ctx, dataset, &fit.vbar),
            EstimationMethod::Henderson3 => l3_hat_h3(ctx, dataset, &extract_ce(dataset)?, &fit.vbar),
            EstimationMethod::Known => unreachable!(),
        };
        components.push(("l3".into(), linalg::symmetrized(&l3)));
        components.push(("l4".into(), l4_hat(ctx, &fit.vbar)));
        components.push(("-l5".into(), -l5_hat(ctx, &fit.vbar)));
    }
    let mut est = CovEstimate::assemble(components, Law::Conditional, &fit.delta_hat, fit.method)?;
    let a = AMatrix::from_context(ctx, dataset, targets)?;
    let inputs = a.lambda_inputs(dataset, &fit.beta_hat);
    let lt = super::amatrix::lambda_tilde(&inputs, &est.sigma)?;
    est.lambda_tilde = Some(lt);
    est.lambda_hat = Some(lt.max(0.0));
    est.lambda_inputs = Some(inputs);
    Ok(est)
}
