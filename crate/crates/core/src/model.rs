//! Block-structured linear mixed models.
//!
//! A dataset is an ordered list of independent clusters, each carrying its
//! response `y_i`, fixed-effect design `X_i` and random-effect design `Z_i`.
//! Covariance structures are supplied through [`CovarianceStructure`]; the
//! nested error regression model ships as [`NestedErrorStructure`].

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{LmmError, Result};
use crate::numerics::linalg;

/// One cluster of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBlock {
    pub id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
}

impl ClusterBlock {
    pub fn new(id: impl Into<String>, y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let id = id.into();
        let n = y.len();
        if n == 0 {
            return Err(LmmError::Structural(format!("cluster '{id}' has no observations")));
        }
        if x.nrows() != n || z.nrows() != n {
            return Err(LmmError::Structural(format!(
                "cluster '{id}': y has {n} rows but X has {} and Z has {}",
                x.nrows(),
                z.nrows()
            )));
        }
        let finite = y.iter().chain(x.iter()).chain(z.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(LmmError::Structural(format!("cluster '{id}' contains non-finite values")));
        }
        Ok(Self { id, y, x, z })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// An ordered collection of `m >= 2` clusters with common `p` and `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmDataset {
    blocks: Vec<ClusterBlock>,
    offsets: Vec<usize>,
    n: usize,
    p: usize,
    q: usize,
}

impl LmmDataset {
    pub fn new(blocks: Vec<ClusterBlock>) -> Result<Self> {
        if blocks.len() < 2 {
            return Err(LmmError::Structural(format!("at least two clusters are required, got {}", blocks.len())));
        }
        let p = blocks[0].x.ncols();
        let q = blocks[0].z.ncols();
        if p == 0 || q == 0 {
            return Err(LmmError::Structural("X and Z need at least one column".into()));
        }
        let mut offsets = Vec::with_capacity(blocks.len() + 1);
        let mut n = 0;
        for b in &blocks {
            if b.x.ncols() != p || b.z.ncols() != q {
                return Err(LmmError::Structural(format!(
                    "cluster '{}' has {}x{} designs, expected p={p}, q={q}",
                    b.id,
                    b.x.ncols(),
                    b.z.ncols()
                )));
            }
            offsets.push(n);
            n += b.n();
        }
        offsets.push(n);

        let mut gram = DMatrix::zeros(p, p);
        for b in &blocks {
            gram += b.x.transpose() * &b.x;
        }
        if let Some(cols) = linalg::collinear_columns(&gram) {
            return Err(LmmError::Rank(format!("stacked X is not of full column rank; collinear columns {cols:?}")));
        }
        Ok(Self { blocks, offsets, n, p, q })
    }

    pub fn blocks(&self) -> &[ClusterBlock] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &ClusterBlock {
        &self.blocks[i]
    }

    /// Number of clusters.
    pub fn m(&self) -> usize {
        self.blocks.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn q(&self) -> usize {
        self.q
    }

    /// Start of cluster `i` in stacked n-vectors.
    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.n()).collect()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.id.as_str()).collect()
    }

    pub fn stacked_y(&self) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for (i, b) in self.blocks.iter().enumerate() {
            y.rows_mut(self.offsets[i], b.n()).copy_from(&b.y);
        }
        y
    }

    pub fn stacked_x(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n, self.p);
        for (i, b) in self.blocks.iter().enumerate() {
            x.rows_mut(self.offsets[i], b.n()).copy_from(&b.x);
        }
        x
    }

    /// Block-diagonal n x (q m) random-effect design.
    pub fn stacked_z(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n, self.q * self.m());
        for (i, b) in self.blocks.iter().enumerate() {
            z.view_mut((self.offsets[i], i * self.q), (b.n(), self.q)).copy_from(&b.z);
        }
        z
    }

    /// Same designs with a different response.
    pub fn with_response(&self, y: &DVector<f64>) -> Result<Self> {
        if y.len() != self.n {
            return Err(LmmError::Dimension { expected: self.n, got: y.len() });
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(LmmError::Structural("response contains non-finite values".into()));
        }
        let mut out = self.clone();
        for (i, b) in out.blocks.iter_mut().enumerate() {
            b.y.copy_from(&y.rows(self.offsets[i], b.n()));
        }
        Ok(out)
    }

    /// Reorders clusters; `order[k]` is the old index placed at position `k`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.m() {
            return Err(LmmError::Dimension { expected: self.m(), got: order.len() });
        }
        Self::new(order.iter().map(|&i| self.blocks[i].clone()).collect())
    }
}

/// Variance components `delta`, componentwise non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceParams(Vec<f64>);

impl VarianceParams {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(LmmError::Argument("variance parameter vector is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(LmmError::Argument(format!("variance component {v} is not admissible")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, e: usize) -> f64 {
        self.0[e]
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }
}

/// Covariance model `G(delta)`, `R_i(delta)` and their first derivatives.
pub trait CovarianceStructure: Send + Sync {
    /// Number of variance components `r`.
    fn n_params(&self) -> usize;

    fn param_names(&self) -> Vec<String> {
        (0..self.n_params()).map(|e| format!("delta{}", e + 1)).collect()
    }

    /// q x q random-effect covariance.
    fn g(&self, delta: &VarianceParams) -> DMatrix<f64>;

    /// n_i x n_i error covariance for `block`.
    fn r(&self, delta: &VarianceParams, block: &ClusterBlock) -> DMatrix<f64>;

    fn dg(&self, delta: &VarianceParams, e: usize) -> DMatrix<f64>;

    fn dr(&self, delta: &VarianceParams, block: &ClusterBlock, e: usize) -> DMatrix<f64>;

    /// True when second derivatives of `G` and `R_i` vanish.
    fn linear_in_delta(&self) -> bool;

    /// Inverse of `R_i`; structures with cheap inverses should override.
    fn r_inverse(&self, delta: &VarianceParams, block: &ClusterBlock) -> Result<DMatrix<f64>> {
        let r = self.r(delta, block);
        r.cholesky().map(|c| c.inverse()).ok_or_else(|| LmmError::Degenerate {
            block: block.id.clone(),
            detail: "R_i is not positive definite".into(),
        })
    }

    /// `log |R_i|`.
    fn r_log_det(&self, delta: &VarianceParams, block: &ClusterBlock) -> Result<f64> {
        let r = self.r(delta, block);
        let chol = r.cholesky().ok_or_else(|| LmmError::Degenerate {
            block: block.id.clone(),
            detail: "R_i is not positive definite".into(),
        })?;
        Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    /// True for the nested error regression model (Z_i = 1, G scalar, R_i = s2 I).
    fn is_nested_error(&self) -> bool {
        false
    }
}

/// Nested error regression: `q = 1`, `Z_i = 1`, `G = sigma_v^2`,
/// `R_i = sigma_e^2 I`, with `delta = (sigma_v^2, sigma_e^2)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NestedErrorStructure;

impl CovarianceStructure for NestedErrorStructure {
    fn n_params(&self) -> usize {
        2
    }

    fn param_names(&self) -> Vec<String> {
        vec!["sigma_v2".into(), "sigma_e2".into()]
    }

    fn g(&self, delta: &VarianceParams) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, delta.get(0))
    }

    fn r(&self, delta: &VarianceParams, block: &ClusterBlock) -> DMatrix<f64> {
        DMatrix::identity(block.n(), block.n()) * delta.get(1)
    }

    fn dg(&self, _delta: &VarianceParams, e: usize) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, if e == 0 { 1.0 } else { 0.0 })
    }

    fn dr(&self, _delta: &VarianceParams, block: &ClusterBlock, e: usize) -> DMatrix<f64> {
        let n = block.n();
        if e == 1 {
            DMatrix::identity(n, n)
        } else {
            DMatrix::zeros(n, n)
        }
    }

    fn linear_in_delta(&self) -> bool {
        true
    }

    fn r_inverse(&self, delta: &VarianceParams, block: &ClusterBlock) -> Result<DMatrix<f64>> {
        let s2 = delta.get(1);
        if s2 <= 0.0 {
            return Err(LmmError::Degenerate {
                block: block.id.clone(),
                detail: "error variance sigma_e^2 is zero".into(),
            });
        }
        Ok(DMatrix::identity(block.n(), block.n()) / s2)
    }

    fn r_log_det(&self, delta: &VarianceParams, block: &ClusterBlock) -> Result<f64> {
        let s2 = delta.get(1);
        if s2 <= 0.0 {
            return Err(LmmError::Degenerate {
                block: block.id.clone(),
                detail: "error variance sigma_e^2 is zero".into(),
            });
        }
        Ok(block.n() as f64 * s2.ln())
    }

    fn is_nested_error(&self) -> bool {
        true
    }
}

/// Independent random effects: `G = diag(delta_1, ..., delta_q)` and
/// `R_i = delta_{q+1} I`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndependentEffectsStructure {
    pub q: usize,
}

impl CovarianceStructure for IndependentEffectsStructure {
    fn n_params(&self) -> usize {
        self.q + 1
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.q).map(|j| format!("sigma_v{}_2", j + 1)).collect();
        names.push("sigma_e2".into());
        names
    }

    fn g(&self, delta: &VarianceParams) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_fn(self.q, |j, _| delta.get(j)))
    }

    fn r(&self, delta: &VarianceParams, block: &ClusterBlock) -> DMatrix<f64> {
        DMatrix::identity(block.n(), block.n()) * delta.get(self.q)
    }

    fn dg(&self, _delta: &VarianceParams, e: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.q, self.q, |a, b| if a == e && b == e { 1.0 } else { 0.0 })
    }

    fn dr(&self, _delta: &VarianceParams, block: &ClusterBlock, e: usize) -> DMatrix<f64> {
        let n = block.n();
        if e == self.q {
            DMatrix::identity(n, n)
        } else {
            DMatrix::zeros(n, n)
        }
    }

    fn linear_in_delta(&self) -> bool {
        true
    }
}

/// Coefficients of the mixed parameters `mu_i = l_i' beta + h_i' v_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedTargets {
    pub l: Vec<DVector<f64>>,
    pub h: Vec<DVector<f64>>,
}

impl MixedTargets {
    pub fn new(l: Vec<DVector<f64>>, h: Vec<DVector<f64>>) -> Result<Self> {
        if l.len() != h.len() {
            return Err(LmmError::Dimension { expected: l.len(), got: h.len() });
        }
        let finite = l.iter().chain(h.iter()).all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(LmmError::Structural("targets contain non-finite values".into()));
        }
        Ok(Self { l, h })
    }

    /// `l_i` = column means of `X_i`, `h_i = 1` (requires `q = 1`).
    pub fn cluster_means(dataset: &LmmDataset) -> Self {
        let l = dataset.blocks().iter().map(|b| column_means(&b.x)).collect();
        let h = (0..dataset.m()).map(|_| DVector::from_element(dataset.q(), 1.0)).collect();
        Self { l, h }
    }

    pub fn m(&self) -> usize {
        self.l.len()
    }

    pub fn check_against(&self, dataset: &LmmDataset) -> Result<()> {
        if self.m() != dataset.m() {
            return Err(LmmError::Dimension { expected: dataset.m(), got: self.m() });
        }
        for (l, h) in self.l.iter().zip(&self.h) {
            if l.len() != dataset.p() {
                return Err(LmmError::Dimension { expected: dataset.p(), got: l.len() });
            }
            if h.len() != dataset.q() {
                return Err(LmmError::Dimension { expected: dataset.q(), got: h.len() });
            }
        }
        Ok(())
    }

    /// `mu_i` for given `beta` and per-cluster random effects.
    pub fn evaluate(&self, beta: &DVector<f64>, v: &[DVector<f64>]) -> DVector<f64> {
        DVector::from_iterator(self.m(), self.l.iter().zip(&self.h).zip(v).map(|((l, h), vi)| l.dot(beta) + h.dot(vi)))
    }
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// One observation for the nested error regression constructor.
#[derive(Debug, Clone, PartialEq)]
pub struct NerRow {
    pub cluster: String,
    pub y: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NerSpec {
    pub rows: Vec<NerRow>,
}

/// Builds the nested error regression model with cluster-mean targets.
///
/// Clusters are indexed by first appearance in `spec.rows`.
pub fn build_ner(spec: &NerSpec) -> Result<(LmmDataset, NestedErrorStructure, MixedTargets)> {
    let Some(first) = spec.rows.first() else {
        return Err(LmmError::Structural("no rows supplied".into()));
    };
    let p = first.x.len();
    let mut order: Vec<String> = Vec::new();
    let mut members: HashMap<&str, Vec<usize>> = HashMap::new();
    for (k, row) in spec.rows.iter().enumerate() {
        if row.cluster.trim().is_empty() {
            return Err(LmmError::Structural(format!("row {} has no cluster id", k + 1)));
        }
        if row.x.len() != p {
            return Err(LmmError::Structural(format!("row {} has {} covariates, expected {p}", k + 1, row.x.len())));
        }
        let entry = members.entry(row.cluster.as_str()).or_default();
        if entry.is_empty() {
            order.push(row.cluster.clone());
        }
        entry.push(k);
    }
    let mut blocks = Vec::with_capacity(order.len());
    for id in &order {
        let idx = &members[id.as_str()];
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&k| spec.rows[k].y));
        let x = DMatrix::from_fn(idx.len(), p, |r, c| spec.rows[idx[r]].x[c]);
        let z = DMatrix::from_element(idx.len(), 1, 1.0);
        blocks.push(ClusterBlock::new(id.clone(), y, x, z)?);
    }
    let dataset = LmmDataset::new(blocks)?;
    let targets = MixedTargets::cluster_means(&dataset);
    Ok((dataset, NestedErrorStructure, targets))
}

/// `V_i(delta) = R_i + Z_i G Z_i'`, checked for positive definiteness.
pub fn marginal_cov(
    structure: &dyn CovarianceStructure,
    block: &ClusterBlock,
    delta: &VarianceParams,
) -> Result<DMatrix<f64>> {
    let v = structure.r(delta, block) + &block.z * structure.g(delta) * block.z.transpose();
    if v.clone().cholesky().is_none() {
        return Err(LmmError::Degenerate { block: block.id.clone(), detail: "V_i is not positive definite".into() });
    }
    Ok(v)
}

/// `dV_i/d delta_e = dR_i/d delta_e + Z_i (dG/d delta_e) Z_i'`.
pub fn marginal_cov_derivative(
    structure: &dyn CovarianceStructure,
    block: &ClusterBlock,
    delta: &VarianceParams,
    e: usize,
) -> DMatrix<f64> {
    structure.dr(delta, block, e) + &block.z * structure.dg(delta, e) * block.z.transpose()
}

/// Intraclass correlation `sigma_v^2 / (sigma_v^2 + sigma_e^2 / n_i)` for the NER ordering.
pub fn icc(delta: &VarianceParams, n_i: usize) -> Result<f64> {
    if delta.len() != 2 {
        return Err(LmmError::Dimension { expected: 2, got: delta.len() });
    }
    if n_i == 0 {
        return Err(LmmError::Argument("cluster size must be positive".into()));
    }
    let (sv, se) = (delta.get(0), delta.get(1));
    let denom = sv + se / n_i as f64;
    if denom <= 0.0 {
        return Err(LmmError::Degenerate { block: String::new(), detail: "both variance components are zero".into() });
    }
    Ok(sv / denom)
}

/// Maximal pairwise deviations behind the Tukey regularity conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct TukeyDiagnostics {
    pub max_h_deviation: f64,
    pub max_l_deviation: f64,
    pub max_precision_deviation: f64,
    pub tolerance: f64,
    pub h_l_pass: bool,
    pub precision_pass: bool,
}

impl TukeyDiagnostics {
    pub fn pass(&self) -> bool {
        self.h_l_pass && self.precision_pass
    }
}

/// Evaluates `||h_i - h_j||`, `||l_i - l_j||` and `|1'V_i^{-1}1 - 1'V_j^{-1}1|`
/// over all pairs in `subset` (all clusters when empty).
pub fn check_tukey_conditions(
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    targets: &MixedTargets,
    delta: &VarianceParams,
    subset: &[usize],
    tolerance: f64,
) -> Result<TukeyDiagnostics> {
    targets.check_against(dataset)?;
    let idx: Vec<usize> = if subset.is_empty() { (0..dataset.m()).collect() } else { subset.to_vec() };
    let mut precision = Vec::with_capacity(idx.len());
    for &i in &idx {
        let block = dataset.block(i);
        let v = marginal_cov(structure, block, delta)?;
        let ones = DVector::from_element(block.n(), 1.0);
        let chol = v.cholesky().expect("checked by marginal_cov");
        precision.push(ones.dot(&chol.solve(&ones)));
    }
    let (mut dh, mut dl, mut dp) = (0.0f64, 0.0f64, 0.0f64);
    for a in 0..idx.len() {
        for b in (a + 1)..idx.len() {
            let (i, j) = (idx[a], idx[b]);
            dh = dh.max((&targets.h[i] - &targets.h[j]).norm());
            dl = dl.max((&targets.l[i] - &targets.l[j]).norm());
            dp = dp.max((precision[a] - precision[b]).abs());
        }
    }
    Ok(TukeyDiagnostics {
        max_h_deviation: dh,
        max_l_deviation: dl,
        max_precision_deviation: dp,
        tolerance,
        h_l_pass: dh <= tolerance && dl <= tolerance,
        precision_pass: dp <= tolerance,
    })
}
