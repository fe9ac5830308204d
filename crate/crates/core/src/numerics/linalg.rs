//! Dense helpers for small symmetric matrices: Cholesky-backed SPD
//! wrapper, Woodbury block inversion, symmetric roots and PSD clamping.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{LmmError, Result};

/// Relative eigenvalue threshold below which a PSD matrix is rejected.
pub const PSD_REJECT_TOL: f64 = 1e-10;
/// Floor (relative to the spectral norm) used when clamping tiny negatives.
pub const PSD_FLOOR: f64 = 1e-12;

/// Returns `(a + a') / 2`, exactly symmetric.
pub fn symmetrized(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    // float addition commutes, so entry (i,j) and (j,i) come out identical
    DMatrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Detects collinearity in a Gram matrix `X'X`.
///
/// Columns are scanned in order; a column whose residual after projecting on
/// the previously accepted columns is negligible is reported together with
/// the accepted columns it depends on.
pub fn collinear_columns(gram: &DMatrix<f64>) -> Option<Vec<usize>> {
    let p = gram.nrows();
    let mut accepted: Vec<usize> = Vec::new();
    for j in 0..p {
        let gjj = gram[(j, j)];
        if !(gjj > 0.0) {
            return Some(vec![j]);
        }
        if accepted.is_empty() {
            accepted.push(j);
            continue;
        }
        let k = accepted.len();
        let gss = DMatrix::from_fn(k, k, |a, b| gram[(accepted[a], accepted[b])]);
        let gsj = DVector::from_fn(k, |a, _| gram[(accepted[a], j)]);
        let coef = match gss.cholesky() {
            Some(c) => c.solve(&gsj),
            None => return Some(accepted.clone()),
        };
        let resid = gjj - gsj.dot(&coef);
        if resid <= 1e-10 * gjj {
            let scale = coef.amax().max(1.0);
            let mut cols: Vec<usize> =
                accepted.iter().zip(coef.iter()).filter(|(_, c)| c.abs() > 1e-8 * scale).map(|(&a, _)| a).collect();
            cols.push(j);
            return Some(cols);
        }
        accepted.push(j);
    }
    None
}

/// Numerical rank with singular values compared against `tol * s_max`.
pub fn numerical_rank(a: &DMatrix<f64>, tol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > tol * smax).count()
}

/// Symmetric positive definite matrix with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    mat: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl SpdMatrix {
    pub fn new(mat: DMatrix<f64>) -> Result<Self> {
        if !mat.is_square() {
            return Err(LmmError::Argument(format!("matrix is {}x{}, not square", mat.nrows(), mat.ncols())));
        }
        let scale = max_abs(&mat).max(f64::MIN_POSITIVE);
        let asym = max_abs(&(&mat - mat.transpose()));
        if asym > 1e-12 * scale {
            return Err(LmmError::Argument(format!("matrix is not symmetric (max deviation {asym:e})")));
        }
        let chol = mat
            .clone()
            .cholesky()
            .ok_or_else(|| LmmError::NotPsd { min_eigenvalue: min_eigenvalue(&mat), norm: scale })?;
        Ok(Self { mat, chol })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrized(&self.chol.inverse())
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `x' M^{-1} x`.
    pub fn inv_quad_form(&self, x: &DVector<f64>) -> f64 {
        let mut z = x.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut z);
        z.norm_squared()
    }

    /// `M^{-1/2}`-whitened vector using the Cholesky root, `L^{-1} x`.
    pub fn whiten(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut z = x.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut z);
        z
    }

    /// `L^{-1} B` for a matrix right-hand side.
    pub fn whiten_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut z);
        z
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrized(m)).eigenvalues.min()
}

/// Result of a Woodbury block inversion.
#[derive(Debug, Clone)]
pub struct WoodburyInverse {
    pub inverse: DMatrix<f64>,
    /// True when the inner matrix was singular and `V` was inverted densely.
    pub fallback: bool,
}

/// `V^{-1}` for `V = R + Z G Z'` given `R^{-1}`.
///
/// Uses `R^{-1} - R^{-1} Z (I + G Z'R^{-1}Z)^{-1} G Z'R^{-1}`, which equals the
/// textbook form when `G` is invertible and stays valid for `G = 0`.
pub fn woodbury_inverse(r_inv: &DMatrix<f64>, z: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<WoodburyInverse> {
    let q = z.ncols();
    let rz = r_inv * z;
    let gzrz = g * z.transpose() * &rz;
    let inner = DMatrix::identity(q, q) + &gzrz;
    let lu = inner.lu();
    let det = lu.determinant();
    let inner_scale = 1.0 + max_abs(&gzrz);
    if det.is_finite() && det.abs() > 1e-12 * inner_scale.powi(q as i32) {
        if let Some(solved) = lu.solve(&(g * rz.transpose())) {
            let inverse = symmetrized(&(r_inv - &rz * solved));
            return Ok(WoodburyInverse { inverse, fallback: false });
        }
    }
    let r = SpdMatrix::new(symmetrized(r_inv))?.inverse();
    let v = symmetrized(&(r + z * g * z.transpose()));
    let inverse = SpdMatrix::new(v)?.inverse();
    Ok(WoodburyInverse { inverse, fallback: true })
}

/// Symmetric square root and (when positive definite) inverse root.
#[derive(Debug, Clone)]
pub struct SymRoots {
    pub sqrt: DMatrix<f64>,
    pub inv_sqrt: Option<DMatrix<f64>>,
    /// True when small negative eigenvalues were set to zero.
    pub clamped: bool,
}

pub fn sym_sqrt(m: &DMatrix<f64>) -> Result<SymRoots> {
    if !m.is_square() {
        return Err(LmmError::Argument("sym_sqrt needs a square matrix".into()));
    }
    let eig = SymmetricEigen::new(symmetrized(m));
    let norm = eig.eigenvalues.amax();
    let mut clamped = false;
    let mut lam = eig.eigenvalues.clone();
    for l in lam.iter_mut() {
        if *l < 0.0 {
            if *l < -PSD_REJECT_TOL * norm {
                return Err(LmmError::NotPsd { min_eigenvalue: *l, norm });
            }
            *l = 0.0;
            clamped = true;
        }
    }
    let u = &eig.eigenvectors;
    let root = |f: &dyn Fn(f64) -> f64| {
        let scaled = DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)] * f(lam[j]));
        symmetrized(&(scaled * u.transpose()))
    };
    let sqrt = root(&|l| l.sqrt());
    let pd = lam.iter().all(|l| *l > PSD_FLOOR * norm);
    let inv_sqrt = pd.then(|| root(&|l| 1.0 / l.sqrt()));
    Ok(SymRoots { sqrt, inv_sqrt, clamped })
}

/// Ensures a symmetric matrix is positive definite.
///
/// Cholesky success leaves the matrix untouched. Otherwise eigenvalues in
/// `(-1e-10 |M|, 1e-12 |M|]` are raised to `1e-12 |M|`; anything more negative
/// is an error. Returns the (possibly repaired) matrix and whether it changed.
pub fn psd_clamp(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    if m.clone().cholesky().is_some() {
        return Ok((m.clone(), false));
    }
    let eig = SymmetricEigen::new(symmetrized(m));
    let norm = eig.eigenvalues.amax();
    if norm == 0.0 || !norm.is_finite() {
        return Err(LmmError::NotPsd { min_eigenvalue: eig.eigenvalues.min(), norm });
    }
    let floor = PSD_FLOOR * norm;
    let mut lam = eig.eigenvalues.clone();
    for l in lam.iter_mut() {
        if *l < -PSD_REJECT_TOL * norm {
            return Err(LmmError::NotPsd { min_eigenvalue: *l, norm });
        }
        if *l < floor {
            *l = floor;
        }
    }
    let u = &eig.eigenvectors;
    let scaled = DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)] * lam[j]);
    Ok((symmetrized(&(scaled * u.transpose())), true))
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix; also reports
/// whether any eigenvalue was treated as zero.
pub fn sym_pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = SymmetricEigen::new(symmetrized(m));
    let norm = eig.eigenvalues.amax();
    let cut = 1e-12 * norm.max(f64::MIN_POSITIVE);
    let mut singular = false;
    let u = &eig.eigenvectors;
    let inv: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l > cut {
                1.0 / l
            } else {
                singular = true;
                0.0
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)] * inv[j]);
    (symmetrized(&(scaled * u.transpose())), singular)
}
