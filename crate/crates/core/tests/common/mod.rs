//! Dense n x n transcriptions used as oracles for the blockwise code, plus
//! small random fixtures.
#![allow(dead_code)]

use mixinf::model::{ClusterBlock, CovarianceStructure, LmmDataset, MixedTargets, VarianceParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Matrix-valued function of delta with first and second derivatives.
#[derive(Clone, Debug)]
pub struct Jet {
    pub v: DMatrix<f64>,
    pub d: Vec<DMatrix<f64>>,
    pub dd: Vec<Vec<DMatrix<f64>>>,
}

impl Jet {
    pub fn constant(v: DMatrix<f64>, r: usize) -> Self {
        let z = DMatrix::zeros(v.nrows(), v.ncols());
        Self { d: vec![z.clone(); r], dd: vec![vec![z; r]; r], v }
    }

    pub fn linear(v: DMatrix<f64>, d: Vec<DMatrix<f64>>) -> Self {
        let r = d.len();
        let z = DMatrix::zeros(v.nrows(), v.ncols());
        Self { v, d, dd: vec![vec![z; r]; r] }
    }

    fn r(&self) -> usize {
        self.d.len()
    }

    pub fn mul(&self, o: &Jet) -> Jet {
        let r = self.r();
        let v = &self.v * &o.v;
        let d = (0..r).map(|e| &self.d[e] * &o.v + &self.v * &o.d[e]).collect();
        let dd = (0..r)
            .map(|e| {
                (0..r)
                    .map(|g| {
                        &self.dd[e][g] * &o.v + &self.d[e] * &o.d[g] + &self.d[g] * &o.d[e] + &self.v * &o.dd[e][g]
                    })
                    .collect()
            })
            .collect();
        Jet { v, d, dd }
    }

    pub fn add(&self, o: &Jet, sign: f64) -> Jet {
        let r = self.r();
        Jet {
            v: &self.v + &o.v * sign,
            d: (0..r).map(|e| &self.d[e] + &o.d[e] * sign).collect(),
            dd: (0..r).map(|e| (0..r).map(|g| &self.dd[e][g] + &o.dd[e][g] * sign).collect()).collect(),
        }
    }

    pub fn t(&self) -> Jet {
        Jet {
            v: self.v.transpose(),
            d: self.d.iter().map(|m| m.transpose()).collect(),
            dd: self.dd.iter().map(|row| row.iter().map(|m| m.transpose()).collect()).collect(),
        }
    }

    pub fn inv(&self) -> Jet {
        let r = self.r();
        let a = self.v.clone().try_inverse().expect("invertible");
        let d: Vec<DMatrix<f64>> = (0..r).map(|e| -(&a * &self.d[e] * &a)).collect();
        let dd = (0..r)
            .map(|e| {
                (0..r)
                    .map(|g| {
                        &a * &self.d[g] * &a * &self.d[e] * &a + &a * &self.d[e] * &a * &self.d[g] * &a
                            - &a * &self.dd[e][g] * &a
                    })
                    .collect()
            })
            .collect();
        Jet { v: a, d, dd }
    }
}

fn blockdiag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.view_mut((r0, c0), (b.nrows(), b.ncols())).copy_from(b);
        r0 += b.nrows();
        c0 += b.ncols();
    }
    out
}

pub fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| x.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

pub struct Dense {
    pub r: usize,
    pub n: usize,
    pub m: usize,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub g: Jet,
    pub rr: Jet,
    pub v: Jet,
    pub vinv: Jet,
    pub f: Jet,
    pub p: Jet,
    /// m x n BLUP weights with rows `b_i'` embedded.
    pub b: Jet,
    /// m x n map `mu_tilde = W y` at GLS `beta`.
    pub w: Jet,
}

impl Dense {
    pub fn new(ds: &LmmDataset, st: &dyn CovarianceStructure, tg: &MixedTargets, delta: &VarianceParams) -> Self {
        let r = st.n_params();
        let (n, m, q) = (ds.n(), ds.m(), ds.q());
        let x = ds.stacked_x();
        let z = ds.stacked_z();
        let gb = st.g(delta);
        let g = Jet::linear(blockdiag(&vec![gb; m]), (0..r).map(|e| blockdiag(&vec![st.dg(delta, e); m])).collect());
        let rr = Jet::linear(
            blockdiag(&ds.blocks().iter().map(|b| st.r(delta, b)).collect::<Vec<_>>()),
            (0..r).map(|e| blockdiag(&ds.blocks().iter().map(|b| st.dr(delta, b, e)).collect::<Vec<_>>())).collect(),
        );
        let zj = Jet::constant(z.clone(), r);
        let xj = Jet::constant(x.clone(), r);
        let v = rr.add(&zj.mul(&g).mul(&zj.t()), 1.0);
        let vinv = v.inv();
        let f = xj.t().mul(&vinv).mul(&xj).inv();
        let proj = vinv.mul(&xj).mul(&f).mul(&xj.t()).mul(&vinv);
        let p = vinv.add(&proj, -1.0);
        let mut h = DMatrix::zeros(q * m, m);
        let mut l = DMatrix::zeros(m, ds.p());
        for i in 0..m {
            h.view_mut((i * q, i), (q, 1)).copy_from(&tg.h[i]);
            l.row_mut(i).copy_from(&tg.l[i].transpose());
        }
        let hj = Jet::constant(h.clone(), r);
        let lj = Jet::constant(l.clone(), r);
        let b = hj.t().mul(&g).mul(&zj.t()).mul(&vinv);
        let w = b.add(&lj.add(&b.mul(&xj), -1.0).mul(&f).mul(&xj.t()).mul(&vinv), 1.0);
        Self { r, n, m, y: ds.stacked_y(), x, z, h, l, g, rr, v, vinv, f, p, b, w }
    }

    pub fn beta(&self) -> DVector<f64> {
        &self.f.v * self.x.transpose() * &self.vinv.v * &self.y
    }

    pub fn loglik(&self) -> f64 {
        let xtvx = self.x.transpose() * &self.vinv.v * &self.x;
        -0.5 * self.v.v.determinant().ln() - 0.5 * xtvx.determinant().ln() - 0.5 * self.y.dot(&(&self.p.v * &self.y))
    }

    pub fn score(&self) -> DVector<f64> {
        let p = &self.p.v;
        DVector::from_fn(self.r, |e, _| {
            let de = &self.v.d[e];
            -0.5 * (p * de).trace() + 0.5 * self.y.dot(&(p * de * p * &self.y))
        })
    }

    pub fn fisher(&self) -> DMatrix<f64> {
        let p = &self.p.v;
        DMatrix::from_fn(self.r, self.r, |e, f| 0.5 * (p * &self.v.d[e] * p * &self.v.d[f]).trace())
    }

    pub fn fisher_derivative(&self, g: usize) -> DMatrix<f64> {
        let p = &self.p.v;
        DMatrix::from_fn(self.r, self.r, |e, f| -(p * &self.v.d[g] * p * &self.v.d[e] * p * &self.v.d[f]).trace())
    }

    fn diag_of(a: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&a.diagonal())
    }

    pub fn k1(&self) -> DMatrix<f64> {
        let g = &self.g.v;
        let hgh = self.h.transpose() * g * &self.h;
        let corr = self.h.transpose() * g * self.z.transpose() * &self.vinv.v * &self.z * g * &self.h;
        Self::diag_of(&(hgh - corr))
    }

    fn l_minus_bx(&self) -> DMatrix<f64> {
        &self.l - &self.b.v * &self.x
    }

    pub fn k2(&self) -> DMatrix<f64> {
        let d = self.l_minus_bx();
        &d * &self.f.v * d.transpose()
    }

    fn grad_form(&self, mid: &DMatrix<f64>, vbar: &DMatrix<f64>) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.m, self.m);
        for e in 0..self.r {
            for f in 0..self.r {
                acc += &self.b.d[e] * mid * self.b.d[f].transpose() * vbar[(f, e)];
            }
        }
        Self::diag_of(&acc)
    }

    pub fn k3(&self, vbar: &DMatrix<f64>) -> DMatrix<f64> {
        self.grad_form(&self.v.v, vbar)
    }

    pub fn l1(&self) -> DMatrix<f64> {
        Self::diag_of(&(&self.b.v * &self.rr.v * self.b.v.transpose()))
    }

    pub fn l2(&self) -> DMatrix<f64> {
        &self.w.v * &self.rr.v * self.w.v.transpose() - &self.b.v * &self.rr.v * self.b.v.transpose()
    }

    pub fn l4(&self, vbar: &DMatrix<f64>) -> DMatrix<f64> {
        self.grad_form(&self.rr.v, vbar)
    }

    pub fn l5(&self, vbar: &DMatrix<f64>) -> DMatrix<f64> {
        let q = self.b.mul(&self.rr).mul(&self.b.t());
        let mut acc = DMatrix::zeros(self.m, self.m);
        for e in 0..self.r {
            for g in 0..self.r {
                acc += &q.dd[e][g] * vbar[(g, e)];
            }
        }
        Self::diag_of(&acc) * 0.5
    }

    fn wcol(&self, k: usize) -> DVector<f64> {
        self.w.v.row(k).transpose()
    }

    /// r x n matrix whose row f is `d w_k' / d delta_f`.
    fn dw_rows(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.r, self.n, |f, j| self.w.d[f][(k, j)])
    }

    pub fn l3_reml(&self, vbar: &DMatrix<f64>) -> DMatrix<f64> {
        let r = self.r;
        let p = &self.p.v;
        let rr = &self.rr.v;
        let info = self.fisher();
        let dinfo: Vec<DMatrix<f64>> = (0..r).map(|g| self.fisher_derivative(g)).collect();
        DMatrix::from_fn(self.m, self.m, |i, k| {
            let wi = self.wcol(i);
            let dwk = self.dw_rows(k);
            let mut t = 0.0;
            for e in 0..r {
                let ve = vbar.row(e).into_owned();
                t += 2.0 * (p * &self.v.d[e] * p * rr * &wi * &ve * &dwk * rr).trace();
            }
            for e in 0..r {
                for d in 0..r {
                    let mut c = 0.0;
                    for f in 0..r {
                        for g in 0..r {
                            c += vbar[(e, f)] * vbar[(f, g)];
                        }
                    }
                    let d2wk = self.w.dd[e][d].row(k).into_owned();
                    t += 4.0 * (&wi * &d2wk * rr).trace() * c * info[(e, d)];
                    let s: f64 = (0..r).map(|f| vbar[(e, f)]).sum();
                    let vd = vbar.column(d).transpose();
                    t -= 2.0 * s * (&wi * vd * &dinfo[e] * vbar * &dwk * rr).trace() * info[(e, d)];
                }
            }
            for e in 0..r {
                for d in 0..r {
                    for g in 0..r {
                        let ve = vbar.row(e).into_owned();
                        t += 2.0 * (&wi * &ve * &dwk * rr).trace() * dinfo[g][(e, d)] * vbar[(e, d)];
                    }
                }
            }
            t
        })
    }

    pub fn l3_h3(&self, c: &[DMatrix<f64>], vbar: &DMatrix<f64>) -> DMatrix<f64> {
        let rr = &self.rr.v;
        DMatrix::from_fn(self.m, self.m, |i, k| {
            let wi = self.wcol(i);
            let mut t = 0.0;
            for e in 0..self.r {
                let dwe = self.w.d[e].row(k).into_owned();
                t += 2.0 * (&wi * dwe * rr * &c[e] * rr).trace();
                for g in 0..self.r {
                    let d2 = self.w.dd[e][g].row(k).into_owned();
                    t += (&wi * d2 * rr).trace() * vbar[(e, g)];
                }
            }
            t
        })
    }

    pub fn a(&self) -> DMatrix<f64> {
        let ztz_inv = (self.z.transpose() * &self.z).try_inverse().unwrap();
        (&self.b.v * &self.z - self.h.transpose()) * ztz_inv * self.z.transpose()
            + self.l_minus_bx() * &self.f.v * self.x.transpose() * &self.vinv.v
    }

    pub fn lambda_tilde(&self, sigma: &DMatrix<f64>, beta: &DVector<f64>) -> f64 {
        let s = sym_sqrt(sigma).try_inverse().unwrap();
        let a = self.a();
        (&s * &a * &self.y).norm_squared()
            - (&s * &a * sym_sqrt(&self.rr.v)).norm_squared()
            - (&s * &a * &self.x * beta).norm_squared()
    }
}

/// Henderson III quadratic-form matrices `(C_1, C_2)` from dense projections.
pub fn dense_henderson(ds: &LmmDataset) -> Vec<DMatrix<f64>> {
    let n = ds.n();
    let x = ds.stacked_x();
    let z = ds.stacked_z();
    let mut mcat = DMatrix::zeros(n, x.ncols() + z.ncols());
    mcat.columns_mut(0, x.ncols()).copy_from(&x);
    mcat.columns_mut(x.ncols(), z.ncols()).copy_from(&z);
    let proj = |a: &DMatrix<f64>| a * (a.transpose() * a).try_inverse().unwrap() * a.transpose();
    let i = DMatrix::<f64>::identity(n, n);
    let (p, m) = (ds.p() as f64, ds.m() as f64);
    let c2 = (&i - proj(&mcat)) / (n as f64 - p - m);
    let ipx = &i - proj(&x);
    let tau = (z.transpose() * &ipx * &z).trace();
    let c1 = (ipx - &c2 * (n as f64 - p)) / tau;
    vec![c1, c2]
}

/// Random unbalanced dataset with `q` random effects (`Z_i = [1, t]` when
/// `q = 2`), optional intercept and random targets.
pub fn random_dataset(seed: u64, m: usize, max_n: usize, q: usize, intercept: bool) -> (LmmDataset, MixedTargets) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = 2;
    let mut blocks = Vec::new();
    let mut l = Vec::new();
    let mut h = Vec::new();
    for i in 0..m {
        let ni = rng.random_range(q.max(2)..=max_n);
        let x = DMatrix::from_fn(ni, p, |_, c| if c == 0 && intercept { 1.0 } else { rng.random_range(-1.0..2.0) });
        let z = DMatrix::from_fn(ni, q, |j, c| {
            if c == 0 {
                1.0
            } else {
                j as f64 - 0.5 * ni as f64 + rng.random_range(-0.2..0.2)
            }
        });
        let y = DVector::from_fn(ni, |_, _| rng.random_range(-2.0..3.0));
        blocks.push(ClusterBlock::new(format!("c{i}"), y, x, z).unwrap());
        l.push(DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0)));
        h.push(DVector::from_fn(q, |_, _| rng.random_range(0.5..1.5)));
    }
    (LmmDataset::new(blocks).unwrap(), MixedTargets::new(l, h).unwrap())
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.amax()
}
