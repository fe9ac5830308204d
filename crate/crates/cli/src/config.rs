//! JSON run configuration. Unknown keys are rejected at every level.

use std::path::Path;

use mixinf::covariance::Law;
use mixinf::simulation::{ClusterSizes, SimConfig, SimEstimator, DEFAULT_REPS, FAST_REPS};
use serde::Deserialize;

use crate::error::{invalid, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    #[default]
    Reml,
    Henderson3,
    Known,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Self::Reml => "reml",
            Self::Henderson3 => "henderson3",
            Self::Known => "known",
        }
    }

    fn sim(self) -> SimEstimator {
        match self {
            Self::Reml => SimEstimator::Reml,
            Self::Henderson3 => SimEstimator::Henderson3,
            Self::Known => SimEstimator::KnownDelta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
pub enum Model {
    #[default]
    #[serde(rename = "ner")]
    Ner,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
pub enum Targets {
    #[default]
    #[serde(rename = "cluster-mean")]
    ClusterMean,
}

/// A cluster given by its label (string) or by its 0-based index (number).
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ClusterRef {
    Index(usize),
    Label(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub enum Builder {
    #[serde(rename = "within-subset-contrasts")]
    WithinSubsetContrasts,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum LSpec {
    Rows(Vec<Vec<f64>>),
    Builder(Builder),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSpec {
    #[serde(rename = "L")]
    pub l: LSpec,
    /// Clusters used by the named builder.
    pub subset: Option<Vec<ClusterRef>>,
    /// Hypothesised value of `mu` (length m); zero when absent.
    pub a: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TukeySpec {
    /// All clusters when absent.
    pub subset: Option<Vec<ClusterRef>>,
    /// Tolerance for the similarity diagnostics behind the warnings.
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProjectSpec {
    /// One coordinate per row of `L`, absorbing that row's adjustment.
    pub designated: Option<Vec<ClusterRef>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimCell {
    pub m: usize,
    pub n_i: ClusterSizes,
    pub sigma_v2: f64,
    pub sigma_e2: f64,
    pub law: Option<Law>,
    pub estimator: Option<Estimator>,
    pub reps: Option<usize>,
    pub oracle_lambda: Option<bool>,
    pub beta_range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowerTest {
    Linear,
    Tukey,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerSpec {
    pub cell: SimCell,
    pub grid: Vec<f64>,
    #[serde(default = "default_power_tests")]
    pub tests: Vec<PowerTest>,
}

fn default_true() -> bool {
    true
}

fn default_power_tests() -> Vec<PowerTest> {
    vec![PowerTest::Linear]
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    #[serde(default)]
    pub coverage: Vec<SimCell>,
    pub power: Option<PowerSpec>,
    /// Reps whose simulated data are written as CSV, for every coverage cell.
    #[serde(default)]
    pub export_reps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: Model,
    #[serde(default)]
    pub estimator: Estimator,
    /// Variance components `(sigma_v2, sigma_e2)`; only with the known estimator.
    pub delta: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub law: Option<Law>,
    #[serde(default)]
    pub targets: Targets,
    /// Prepend an intercept column to the covariates.
    #[serde(default = "default_true")]
    pub intercept: bool,
    pub test: Option<TestSpec>,
    pub tukey: Option<TukeySpec>,
    pub project: Option<ProjectSpec>,
    pub simulate: Option<SimulateSpec>,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::parse("{}").expect("empty config is valid")
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text =
            std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> CliResult<()> {
        match (&self.delta, self.estimator) {
            (None, Estimator::Known) => return Err(invalid("config: estimator 'known' needs 'delta'")),
            (Some(_), Estimator::Reml | Estimator::Henderson3) => {
                return Err(invalid("config: 'delta' is only used with estimator 'known'"))
            }
            (Some(d), Estimator::Known) if d.len() != 2 || d.iter().any(|v| !(v.is_finite() && *v >= 0.0)) => {
                return Err(invalid("config: 'delta' must be [sigma_v2, sigma_e2] with finite entries >= 0"))
            }
            _ => {}
        }
        if let Some(a) = self.alpha {
            check_alpha(a)?;
        }
        Ok(())
    }

    /// Command-line value first, then the config, then 0.05.
    pub fn alpha(&self, flag: Option<f64>) -> CliResult<f64> {
        let a = flag.or(self.alpha).unwrap_or(0.05);
        check_alpha(a)?;
        Ok(a)
    }

    pub fn law_or(&self, default: Law) -> Law {
        self.law.unwrap_or(default)
    }

    pub fn sim_config(&self, cell: &SimCell, seed: u64, alpha: f64, fast: bool) -> CliResult<SimConfig> {
        let estimator = cell.estimator.unwrap_or(self.estimator);
        let cfg = SimConfig {
            m: cell.m,
            n_i: cell.n_i.clone(),
            sigma_v2: cell.sigma_v2,
            sigma_e2: cell.sigma_e2,
            reps: if fast { FAST_REPS } else { cell.reps.unwrap_or(DEFAULT_REPS) },
            alpha,
            seed,
            law: cell.law.unwrap_or(self.law_or(Law::Conditional)),
            estimator: estimator.sim(),
            oracle_lambda: cell.oracle_lambda.unwrap_or(true),
            beta_range: cell.beta_range.unwrap_or((0.0, 1.0)),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_alpha(a: f64) -> CliResult<()> {
    if a > 0.0 && a < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("alpha must lie in (0, 1), got {a}")))
    }
}
