//! Deterministic Monte Carlo harness for the nested error regression model
//! with an intercept: coverage of confidence ellipsoids, cluster-wise
//! intervals, power curves and the unbiasedness of the covariance estimators.
//!
//! Every random draw comes from a ChaCha stream keyed by `(seed, rep, role)`,
//! so results do not depend on the number of worker threads.

pub mod clusterwise;
pub mod coverage;
pub mod power;
pub mod unbiasedness;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::conditional::conditional_from_context;
use crate::covariance::marginal::marginal_from_context;
use crate::covariance::{AMatrix, CovContext, CovEstimate, Law};
use crate::error::{LmmError, Result};
use crate::estimation::{fit_henderson3_ner, fit_reml, RemlOptions, VarianceFit};
use crate::model::{ClusterBlock, LmmDataset, MixedTargets, NestedErrorStructure, VarianceParams};
use crate::numerics::linalg::{self, SpdMatrix};
use crate::prediction::blup_from_components;

pub use clusterwise::{run_clusterwise, ClusterwiseEntry, ClusterwiseReport};
pub use coverage::{run_coverage, run_marginal_table, CoverageReport, MethodCoverage};
pub use power::{run_power_linear, run_power_tukey, PowerPoint, PowerReport};
pub use unbiasedness::{run_unbiasedness, UnbiasednessReport};

pub const DEFAULT_REPS: usize = 5000;
pub const FAST_REPS: usize = 1000;

/// Number of observations per cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClusterSizes {
    Common(usize),
    PerCluster(Vec<usize>),
}

impl ClusterSizes {
    /// The first `m/2` clusters get `n_first` observations, the rest `n_second`.
    pub fn split(m: usize, n_first: usize, n_second: usize) -> Self {
        Self::PerCluster((0..m).map(|i| if i < m / 2 { n_first } else { n_second }).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimEstimator {
    /// Only the columns at the true variance components.
    KnownDelta,
    Reml,
    Henderson3,
}

impl SimEstimator {
    pub fn name(self) -> &'static str {
        match self {
            Self::KnownDelta => "known",
            Self::Reml => "reml",
            Self::Henderson3 => "henderson3",
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_beta_range() -> (f64, f64) {
    (0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub m: usize,
    pub n_i: ClusterSizes,
    pub sigma_v2: f64,
    pub sigma_e2: f64,
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
    pub law: Law,
    pub estimator: SimEstimator,
    #[serde(default = "default_true")]
    pub oracle_lambda: bool,
    /// Bounds of the uniform draw of the scalar fixed effect.
    #[serde(default = "default_beta_range")]
    pub beta_range: (f64, f64),
}

impl SimConfig {
    /// Balanced design under the conditional law with REML and default reps.
    pub fn new(m: usize, n_i: usize, sigma_v2: f64, sigma_e2: f64, seed: u64) -> Self {
        Self {
            m,
            n_i: ClusterSizes::Common(n_i),
            sigma_v2,
            sigma_e2,
            reps: DEFAULT_REPS,
            alpha: 0.05,
            seed,
            law: Law::Conditional,
            estimator: SimEstimator::Reml,
            oracle_lambda: true,
            beta_range: default_beta_range(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LmmError::Argument(msg));
        if self.m < 2 {
            return bad(format!("m must be at least 2, got {}", self.m));
        }
        if let ClusterSizes::PerCluster(v) = &self.n_i {
            if v.len() != self.m {
                return bad(format!("{} cluster sizes given for m = {}", v.len(), self.m));
            }
        }
        if self.sizes().contains(&0) {
            return bad("every cluster needs at least one observation".into());
        }
        if !(self.sigma_v2 >= 0.0 && self.sigma_v2.is_finite()) {
            return bad(format!("sigma_v2 must be finite and >= 0, got {}", self.sigma_v2));
        }
        if !(self.sigma_e2 > 0.0 && self.sigma_e2.is_finite()) {
            return bad(format!("sigma_e2 must be finite and > 0, got {}", self.sigma_e2));
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        let (lo, hi) = self.beta_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad(format!("beta_range must be finite with lo < hi, got ({lo}, {hi})"));
        }
        Ok(())
    }

    pub fn sizes(&self) -> Vec<usize> {
        match &self.n_i {
            ClusterSizes::Common(n) => vec![*n; self.m],
            ClusterSizes::PerCluster(v) => v.clone(),
        }
    }

    pub fn delta(&self) -> VarianceParams {
        VarianceParams::new(vec![self.sigma_v2, self.sigma_e2]).expect("validated variance components")
    }
}

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub(crate) enum StreamRole {
    Population = 0,
    Errors = 1,
    Effects = 2,
}

/// Generator for one `(rep, role)` pair.
pub(crate) fn stream(seed: u64, rep: u64, role: StreamRole) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep * 8 + role as u64);
    rng
}

fn normals(rng: &mut ChaCha8Rng, k: usize, sd: f64) -> Vec<f64> {
    (0..k).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Fixed part of the simulation truth: scalar `beta` and, under the
/// conditional law, the random effects held fixed over all reps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Population {
    pub beta: f64,
    pub v: Vec<f64>,
    pub sizes: Vec<usize>,
}

pub fn generate_population(cfg: &SimConfig) -> Result<Population> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, 0, StreamRole::Population);
    let (lo, hi) = cfg.beta_range;
    let beta = rng.random_range(lo..hi);
    let v = normals(&mut rng, cfg.m, cfg.sigma_v2.sqrt());
    Ok(Population { beta, v, sizes: cfg.sizes() })
}

impl Population {
    /// `mu_i = beta + v_i` for the given effects.
    pub fn mu(&self, v: &[f64]) -> DVector<f64> {
        DVector::from_iterator(v.len(), v.iter().map(|vi| self.beta + vi))
    }
}

/// Size of the random effects relative to the conditions that keep the
/// conditional law close to the marginal one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectDiagnostics {
    /// `|sum v_i| / sqrt(m)`.
    pub c1: f64,
    /// `|sum (v_i^2 - sigma_v^2)| / sqrt(m)`.
    pub c2: f64,
}

impl EffectDiagnostics {
    pub fn of(v: &[f64], sigma_v2: f64) -> Self {
        let rm = (v.len() as f64).sqrt();
        Self { c1: v.iter().sum::<f64>().abs() / rm, c2: v.iter().map(|x| x * x - sigma_v2).sum::<f64>().abs() / rm }
    }
}

/// Intercept-only design with zero response.
pub(crate) fn design(sizes: &[usize]) -> Result<(LmmDataset, MixedTargets)> {
    let blocks = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            ClusterBlock::new(
                format!("{}", i + 1),
                DVector::zeros(n),
                DMatrix::from_element(n, 1, 1.0),
                DMatrix::from_element(n, 1, 1.0),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = LmmDataset::new(blocks)?;
    let tg = MixedTargets::cluster_means(&ds);
    Ok((ds, tg))
}

/// Everything that is fixed across reps at the true variance components.
pub(crate) struct KnownPieces {
    pub ctx: CovContext,
    pub a: AMatrix,
    pub marginal: CovEstimate,
    pub conditional: CovEstimate,
    pub chol_marginal: SpdMatrix,
    pub chol_conditional: SpdMatrix,
    /// `tr(Sigma_v^{-1} A R A')`.
    pub trace_term: f64,
    pub chi2_threshold: f64,
}

impl KnownPieces {
    fn new(ds: &LmmDataset, tg: &MixedTargets, delta: &VarianceParams, alpha: f64) -> Result<Self> {
        let ctx = CovContext::new(ds, &NestedErrorStructure, tg, delta)?;
        let fit = VarianceFit::known(ds, &NestedErrorStructure, delta)?;
        let marginal = marginal_from_context(&ctx, ds, tg, &fit)?;
        let conditional = conditional_from_context(&ctx, ds, &NestedErrorStructure, tg, &fit)?;
        let a = AMatrix::from_context(&ctx, ds, tg)?;
        let chol_marginal = SpdMatrix::new(linalg::symmetrized(&marginal.sigma))?;
        let chol_conditional = SpdMatrix::new(linalg::symmetrized(&conditional.sigma))?;
        let trace_term = chol_conditional.solve(&a.a_r_at()).trace();
        let chi2_threshold = crate::numerics::chi2::chi2_quantile(ds.m() as f64, 1.0 - alpha)?;
        Ok(Self { ctx, a, marginal, conditional, chol_marginal, chol_conditional, trace_term, chi2_threshold })
    }

    /// GLS `beta_hat` at the true variance components.
    pub fn beta_hat(&self, ds: &LmmDataset) -> DVector<f64> {
        let st = &self.ctx.state;
        let mut xtwy = DVector::zeros(st.f.nrows());
        for (bc, b) in st.blocks.iter().zip(ds.blocks()) {
            xtwy += bc.u.transpose() * &b.y;
        }
        &st.f * xtwy
    }

    pub fn mu_hat(&self, ds: &LmmDataset, tg: &MixedTargets) -> (DVector<f64>, DVector<f64>) {
        let beta = self.beta_hat(ds);
        (blup_from_components(ds, tg, &self.ctx.comp, &beta), beta)
    }

    /// `max(0, lambda_tilde)` for one response at the true variance components.
    pub fn lambda_hat(&self, ds: &LmmDataset, beta: &DVector<f64>) -> f64 {
        let y: Vec<DVector<f64>> = ds.blocks().iter().map(|b| b.y.clone()).collect();
        let ay = self.a.apply(&y);
        let axb = self.a.a_x_beta(ds, beta);
        let lt = self.chol_conditional.inv_quad_form(&ay) - self.trace_term - self.chol_conditional.inv_quad_form(&axb);
        lt.max(0.0)
    }

    /// True non-centrality for effects `v`.
    pub fn oracle_lambda(&self, ds: &LmmDataset, v: &[f64]) -> f64 {
        let bias = self.a.a_z_v(ds, &effect_vectors(v));
        self.chol_conditional.inv_quad_form(&bias)
    }
}

pub(crate) fn effect_vectors(v: &[f64]) -> Vec<DVector<f64>> {
    v.iter().map(|x| DVector::from_element(1, *x)).collect()
}

/// One simulated sample.
pub(crate) struct RepData {
    pub ds: LmmDataset,
    pub v: Vec<f64>,
    pub mu: DVector<f64>,
}

/// Estimated pieces for one sample.
pub(crate) struct Estimated {
    pub mu_hat: DVector<f64>,
    pub marginal: Option<CovEstimate>,
    pub conditional: Option<CovEstimate>,
}

pub(crate) struct Harness {
    pub cfg: SimConfig,
    pub pop: Population,
    pub ds: LmmDataset,
    pub tg: MixedTargets,
    pub known: KnownPieces,
}

impl Harness {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        let pop = generate_population(cfg)?;
        let (ds, tg) = design(&pop.sizes)?;
        let known = KnownPieces::new(&ds, &tg, &cfg.delta(), cfg.alpha)?;
        Ok(Self { cfg: cfg.clone(), pop, ds, tg, known })
    }

    pub fn m(&self) -> usize {
        self.cfg.m
    }

    /// Random effects of a rep: fixed under the conditional law, redrawn
    /// under the marginal law.
    pub fn effects(&self, rep: usize) -> Vec<f64> {
        match self.cfg.law {
            Law::Conditional => self.pop.v.clone(),
            Law::Marginal => {
                let mut rng = stream(self.cfg.seed, rep as u64, StreamRole::Effects);
                normals(&mut rng, self.cfg.m, self.cfg.sigma_v2.sqrt())
            }
        }
    }

    pub fn errors(&self, rep: usize) -> Vec<f64> {
        let mut rng = stream(self.cfg.seed, rep as u64, StreamRole::Errors);
        normals(&mut rng, self.ds.n(), self.cfg.sigma_e2.sqrt())
    }

    /// `y_ij = beta + v_i + e_ij`.
    pub fn sample(&self, v: Vec<f64>, e: &[f64]) -> Result<RepData> {
        let mut y = DVector::zeros(self.ds.n());
        for (i, &n) in self.pop.sizes.iter().enumerate() {
            let o = self.ds.offset(i);
            for j in 0..n {
                y[o + j] = self.pop.beta + v[i] + e[o + j];
            }
        }
        let ds = self.ds.with_response(&y)?;
        let mu = self.pop.mu(&v);
        Ok(RepData { ds, v, mu })
    }

    pub fn draw(&self, rep: usize) -> Result<RepData> {
        self.sample(self.effects(rep), &self.errors(rep))
    }

    pub fn fit(&self, ds: &LmmDataset) -> Result<VarianceFit> {
        match self.cfg.estimator {
            SimEstimator::Reml => fit_reml(ds, &NestedErrorStructure, &RemlOptions::default()),
            SimEstimator::Henderson3 => fit_henderson3_ner(ds),
            SimEstimator::KnownDelta => VarianceFit::known(ds, &NestedErrorStructure, &self.cfg.delta()),
        }
    }

    /// EBLUP and the requested covariance estimates at the fitted components.
    pub fn estimate(&self, ds: &LmmDataset, marginal: bool, conditional: bool) -> Result<Estimated> {
        let fit = self.fit(ds)?;
        let ctx = CovContext::new(ds, &NestedErrorStructure, &self.tg, &fit.delta_hat)?;
        let mu_hat = blup_from_components(ds, &self.tg, &ctx.comp, &fit.beta_hat);
        let marginal = if marginal { Some(marginal_from_context(&ctx, ds, &self.tg, &fit)?) } else { None };
        let conditional = if conditional {
            Some(conditional_from_context(&ctx, ds, &NestedErrorStructure, &self.tg, &fit)?)
        } else {
            None
        };
        if !mu_hat.iter().all(|x| x.is_finite()) {
            return Err(LmmError::Numeric("non-finite EBLUP".into()));
        }
        Ok(Estimated { mu_hat, marginal, conditional })
    }
}

/// One simulated dataset together with its true mixed parameters, as used
/// by rep `rep` of the harness.
pub fn simulate_dataset(cfg: &SimConfig, rep: usize) -> Result<(LmmDataset, DVector<f64>)> {
    let h = Harness::new(cfg)?;
    let d = h.draw(rep)?;
    Ok((d.ds, d.mu))
}

/// `sqrt(p (1 - p) / n)`.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

/// `log vol` of `{x : x' S^{-1} x <= t}` up to the constant of the unit ball.
pub(crate) fn log_volume(log_det: f64, threshold: f64, m: usize) -> f64 {
    0.5 * log_det + 0.5 * m as f64 * threshold.ln()
}
