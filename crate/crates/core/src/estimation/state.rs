//! Per-cluster quantities at a fixed `delta`.
//!
//! Nothing here materialises an n x n matrix. The REML projection
//! `P = V^{-1} - V^{-1} X (X'V^{-1}X)^{-1} X'V^{-1}` is kept in the factored
//! form `P = W - T U'` with block-diagonal `W = V^{-1}`, `U = W X` and
//! `T = U (X'WX)^{-1}`.

use nalgebra::{DMatrix, DVector};

use crate::error::{LmmError, Result};
use crate::model::{CovarianceStructure, LmmDataset, VarianceParams};
use crate::numerics::linalg::{self, SpdMatrix};

#[derive(Debug, Clone)]
pub struct BlockCache {
    /// `V_i^{-1}`.
    pub w: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub dr: Vec<DMatrix<f64>>,
    /// `dV_i / d delta_e`.
    pub dv: Vec<DMatrix<f64>>,
    /// `W_i X_i`.
    pub u: DMatrix<f64>,
    /// `W_i X_i F`, the i-th block of `T`.
    pub t: DMatrix<f64>,
    /// `W_i (y_i - X_i beta_hat)`, the i-th block of `P y`.
    pub py: DVector<f64>,
    pub log_det_v: f64,
}

#[derive(Debug, Clone)]
pub struct BlockState {
    pub delta: VarianceParams,
    pub g: DMatrix<f64>,
    pub dg: Vec<DMatrix<f64>>,
    pub blocks: Vec<BlockCache>,
    /// `X' V^{-1} X`.
    pub xtwx: DMatrix<f64>,
    /// `F = (X' V^{-1} X)^{-1}`.
    pub f: DMatrix<f64>,
    pub beta: DVector<f64>,
    pub log_det_v: f64,
    pub log_det_xtwx: f64,
    /// Some block needed the dense fallback inversion.
    pub fallback: bool,
}

impl BlockState {
    pub fn new(dataset: &LmmDataset, structure: &dyn CovarianceStructure, delta: &VarianceParams) -> Result<Self> {
        let r_par = structure.n_params();
        if delta.len() != r_par {
            return Err(LmmError::Dimension { expected: r_par, got: delta.len() });
        }
        let g = structure.g(delta);
        let dg: Vec<_> = (0..r_par).map(|e| structure.dg(delta, e)).collect();
        let p = dataset.p();
        let q = dataset.q();
        let mut blocks = Vec::with_capacity(dataset.m());
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwy = DVector::zeros(p);
        let mut fallback = false;
        let mut log_det_v = 0.0;
        for b in dataset.blocks() {
            let r_inv = structure.r_inverse(delta, b)?;
            let wb = linalg::woodbury_inverse(&r_inv, &b.z, &g)
                .map_err(|e| LmmError::Degenerate { block: b.id.clone(), detail: e.to_string() })?;
            fallback |= wb.fallback;
            let inner = DMatrix::identity(q, q) + &g * b.z.transpose() * &r_inv * &b.z;
            let det_inner = inner.determinant();
            let ld = if det_inner > 0.0 && det_inner.is_finite() {
                structure.r_log_det(delta, b)? + det_inner.ln()
            } else {
                let v = structure.r(delta, b) + &b.z * &g * b.z.transpose();
                SpdMatrix::new(linalg::symmetrized(&v))
                    .map_err(|_| LmmError::Degenerate {
                        block: b.id.clone(),
                        detail: "V_i is not positive definite".into(),
                    })?
                    .log_det()
            };
            log_det_v += ld;
            let w = wb.inverse;
            let u = &w * &b.x;
            xtwx += b.x.transpose() * &u;
            xtwy += u.transpose() * &b.y;
            let dr: Vec<_> = (0..r_par).map(|e| structure.dr(delta, b, e)).collect();
            let dv = (0..r_par).map(|e| &dr[e] + &b.z * &dg[e] * b.z.transpose()).collect();
            blocks.push(BlockCache {
                w,
                r: structure.r(delta, b),
                dr,
                dv,
                u,
                t: DMatrix::zeros(0, 0),
                py: DVector::zeros(0),
                log_det_v: ld,
            });
        }
        let xtwx = linalg::symmetrized(&xtwx);
        let spd = SpdMatrix::new(xtwx.clone()).map_err(|_| {
            let cols = linalg::collinear_columns(&xtwx).unwrap_or_default();
            LmmError::Rank(format!("X'V^{{-1}}X is singular; collinear columns {cols:?}"))
        })?;
        let f = spd.inverse();
        let beta = spd.solve_vec(&xtwy);
        for (bc, b) in blocks.iter_mut().zip(dataset.blocks()) {
            bc.t = &bc.u * &f;
            bc.py = &bc.w * (&b.y - &b.x * &beta);
        }
        Ok(Self {
            delta: delta.clone(),
            g,
            dg,
            blocks,
            log_det_xtwx: spd.log_det(),
            xtwx,
            f,
            beta,
            log_det_v,
            fallback,
        })
    }

    /// Refresh `beta_hat` and `P y` for a new response with the same design
    /// and variance components.
    pub fn update_response(&mut self, dataset: &LmmDataset) {
        let mut xtwy = DVector::zeros(self.f.nrows());
        for (bc, b) in self.blocks.iter().zip(dataset.blocks()) {
            xtwy += bc.u.transpose() * &b.y;
        }
        self.beta = &self.f * xtwy;
        for (bc, b) in self.blocks.iter_mut().zip(dataset.blocks()) {
            bc.py = &bc.w * (&b.y - &b.x * &self.beta);
        }
    }

    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_params(&self) -> usize {
        self.dg.len()
    }

    /// `P x` for a block-partitioned vector.
    pub fn apply_p(&self, x: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let p = self.f.nrows();
        let mut utx = DVector::zeros(p);
        for (bc, xi) in self.blocks.iter().zip(x) {
            utx += bc.u.transpose() * xi;
        }
        self.blocks.iter().zip(x).map(|(bc, xi)| &bc.w * xi - &bc.t * &utx).collect()
    }

    /// `T' x` (a p-vector).
    pub fn t_transpose_apply(&self, x: &[DVector<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.f.nrows());
        for (bc, xi) in self.blocks.iter().zip(x) {
            out += bc.t.transpose() * xi;
        }
        out
    }

    /// `tr(A_1 P A_2 P ... A_k P)` for block-diagonal `A_j`, where
    /// `get(i, j)` returns block `i` of `A_j`.
    ///
    /// Each factor `A_j P = B_j - a_j U'` with `B_j = A_j W` block-diagonal and
    /// `a_j = A_j T`. Expanding the product over the positions that take the
    /// low-rank part turns every term into either a blockwise trace or a trace
    /// of p x p products.
    pub fn cycle_trace<'a, F>(&'a self, k: usize, get: F) -> f64
    where
        F: Fn(usize, usize) -> &'a DMatrix<f64>,
    {
        let p = self.f.nrows();
        let mut bmat: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(self.m());
        let mut amat: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(self.m());
        for (i, bc) in self.blocks.iter().enumerate() {
            bmat.push((0..k).map(|j| get(i, j) * &bc.w).collect());
            amat.push((0..k).map(|j| get(i, j) * &bc.t).collect());
        }
        let mut total = 0.0;
        for mask in 0u32..(1u32 << k) {
            let sel: Vec<usize> = (0..k).filter(|j| mask & (1 << j) != 0).collect();
            if sel.is_empty() {
                let mut s = 0.0;
                for bl in &bmat {
                    let mut prod = bl[0].clone();
                    for bj in &bl[1..] {
                        prod *= bj;
                    }
                    s += prod.trace();
                }
                total += s;
                continue;
            }
            let t = sel.len();
            let mut chain = DMatrix::<f64>::identity(p, p);
            for a in 0..t {
                let from = sel[a];
                let to = sel[(a + 1) % t];
                // positions strictly between `from` and `to`, cyclically
                let mut between = Vec::new();
                let mut j = (from + 1) % k;
                while j != to {
                    between.push(j);
                    j = (j + 1) % k;
                }
                let mut m_a = DMatrix::<f64>::zeros(p, p);
                for (i, bc) in self.blocks.iter().enumerate() {
                    let mut right = amat[i][to].clone();
                    for &jj in between.iter().rev() {
                        right = &bmat[i][jj] * right;
                    }
                    m_a += bc.u.transpose() * right;
                }
                chain *= m_a;
            }
            let sign = if t.is_multiple_of(2) { 1.0 } else { -1.0 };
            total += sign * chain.trace();
        }
        total
    }

    /// `y'Py = sum_i (y_i - X_i beta)' W_i (y_i - X_i beta)`.
    pub fn ypy(&self, dataset: &LmmDataset) -> f64 {
        self.blocks.iter().zip(dataset.blocks()).map(|(bc, b)| (&b.y - &b.x * &self.beta).dot(&bc.py)).sum()
    }
}

/// GLS estimate `beta_hat(delta)` with `(X'V^{-1}X)^{-1}`.
pub fn gls_beta(
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    delta: &VarianceParams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let st = BlockState::new(dataset, structure, delta)?;
    Ok((st.beta, st.f))
}

/// Restricted log-likelihood without its additive constant.
pub fn restricted_loglik(
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    delta: &VarianceParams,
) -> Result<f64> {
    let st = BlockState::new(dataset, structure, delta)?;
    Ok(loglik_from_state(&st, dataset))
}

pub(crate) fn loglik_from_state(st: &BlockState, dataset: &LmmDataset) -> f64 {
    -0.5 * st.log_det_v - 0.5 * st.log_det_xtwx - 0.5 * st.ypy(dataset)
}

pub(crate) fn score_from_state(st: &BlockState) -> DVector<f64> {
    DVector::from_fn(st.n_params(), |e, _| {
        let tr = st.cycle_trace(1, |i, _| &st.blocks[i].dv[e]);
        let quad: f64 = st.blocks.iter().map(|bc| bc.py.dot(&(&bc.dv[e] * &bc.py))).sum();
        -0.5 * tr + 0.5 * quad
    })
}

pub(crate) fn fisher_from_state(st: &BlockState) -> DMatrix<f64> {
    let r = st.n_params();
    let mut info = DMatrix::zeros(r, r);
    for e in 0..r {
        for f in e..r {
            let v = 0.5 * st.cycle_trace(2, |i, j| &st.blocks[i].dv[if j == 0 { e } else { f }]);
            info[(e, f)] = v;
            info[(f, e)] = v;
        }
    }
    info
}

/// `d I_{ef} / d delta_g = -tr(D_g P D_e P D_f P)` for all `(e, f)` at fixed `g`.
pub(crate) fn fisher_derivative_from_state(st: &BlockState, g: usize) -> DMatrix<f64> {
    let r = st.n_params();
    let mut out = DMatrix::zeros(r, r);
    for e in 0..r {
        for f in e..r {
            let idx = [g, e, f];
            let v = -st.cycle_trace(3, |i, j| &st.blocks[i].dv[idx[j]]);
            out[(e, f)] = v;
            out[(f, e)] = v;
        }
    }
    out
}

/// REML score `s_e = -tr(P D_e)/2 + y'P D_e P y / 2`.
pub fn reml_score(
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    delta: &VarianceParams,
) -> Result<DVector<f64>> {
    Ok(score_from_state(&BlockState::new(dataset, structure, delta)?))
}

/// Expected information `tr(P D_e P D_f) / 2`.
pub fn reml_fisher_info(
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    delta: &VarianceParams,
) -> Result<DMatrix<f64>> {
    Ok(fisher_from_state(&BlockState::new(dataset, structure, delta)?))
}

/// Derivative of the expected information with respect to `delta_g`.
pub fn fisher_info_derivative(
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    delta: &VarianceParams,
    g: usize,
) -> Result<DMatrix<f64>> {
    if !structure.linear_in_delta() {
        return Err(LmmError::Argument("information derivative requires a structure linear in delta".into()));
    }
    if g >= structure.n_params() {
        return Err(LmmError::Dimension { expected: structure.n_params(), got: g });
    }
    Ok(fisher_derivative_from_state(&BlockState::new(dataset, structure, delta)?, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_ner, NerRow, NerSpec, NestedErrorStructure};
    use approx::assert_relative_eq;

    fn t1() -> LmmDataset {
        let rows = vec![
            NerRow { cluster: "1".into(), y: 1.0, x: vec![1.0, 2.0] },
            NerRow { cluster: "1".into(), y: 2.0, x: vec![1.0, 3.0] },
            NerRow { cluster: "2".into(), y: 2.0, x: vec![1.0, 2.0] },
            NerRow { cluster: "2".into(), y: 4.0, x: vec![1.0, 3.0] },
        ];
        build_ner(&NerSpec { rows }).unwrap().0
    }

    fn d(a: f64, b: f64) -> VarianceParams {
        VarianceParams::new(vec![a, b]).unwrap()
    }

    #[test]
    fn identity_v_reduces_to_ols() {
        let ds = t1();
        let (beta, _) = gls_beta(&ds, &NestedErrorStructure, &d(0.0, 1.0)).unwrap();
        let x = ds.stacked_x();
        let y = ds.stacked_y();
        let ols = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &y));
        assert_relative_eq!(beta, ols, epsilon = 1e-12);
        let ll = restricted_loglik(&ds, &NestedErrorStructure, &d(0.0, 1.0)).unwrap();
        let h = &x * (x.transpose() * &x).cholesky().unwrap().inverse() * x.transpose();
        let resid = (DMatrix::identity(4, 4) - h) * &y;
        let logdet_xtx = (x.transpose() * &x).determinant().ln();
        assert_relative_eq!(ll, -0.5 * y.dot(&resid) - 0.5 * logdet_xtx, epsilon = 1e-12);
    }

    #[test]
    fn duplicated_column_is_rank_error() {
        let rows = (0..6)
            .map(|k| NerRow { cluster: format!("{}", k % 2), y: k as f64, x: vec![k as f64, k as f64] })
            .collect();
        let err = build_ner(&NerSpec { rows }).unwrap_err();
        assert!(matches!(err, LmmError::Rank(_)));
    }

    #[test]
    fn pvp_equals_p() {
        let ds = t1();
        let st = BlockState::new(&ds, &NestedErrorStructure, &d(1.3, 0.7)).unwrap();
        // columns of P by applying to unit vectors, then check P V P = P
        let n = ds.n();
        let sizes = ds.cluster_sizes();
        let split = |v: &DVector<f64>| {
            let mut out = Vec::new();
            let mut o = 0;
            for &s in &sizes {
                out.push(v.rows(o, s).into_owned());
                o += s;
            }
            out
        };
        let join = |v: &[DVector<f64>]| DVector::from_iterator(n, v.iter().flat_map(|b| b.iter().copied()));
        let mut p = DMatrix::zeros(n, n);
        for k in 0..n {
            let mut e = DVector::zeros(n);
            e[k] = 1.0;
            p.set_column(k, &join(&st.apply_p(&split(&e))));
        }
        let mut v = DMatrix::zeros(n, n);
        let mut o = 0;
        for (b, blk) in ds.blocks().iter().enumerate() {
            let vi = crate::model::marginal_cov(&NestedErrorStructure, blk, &st.delta).unwrap();
            v.view_mut((o, o), (vi.nrows(), vi.nrows())).copy_from(&vi);
            o += ds.block(b).n();
        }
        assert!(linalg::max_abs(&(&p * &v * &p - &p)) < 1e-8);
    }
}
