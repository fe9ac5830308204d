//! Fixed-effect GLS, REML fitting and Henderson III for the nested error model.

pub mod henderson;
pub mod reml;
pub mod state;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::Result;
use crate::model::{CovarianceStructure, LmmDataset, VarianceParams};

pub use henderson::{extract_ce, fit_henderson3_ner, HendersonOperators};
pub use reml::{fit_reml, RemlOptions};
pub use state::{fisher_info_derivative, gls_beta, reml_fisher_info, reml_score, restricted_loglik, BlockState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimationMethod {
    Reml,
    Henderson3,
    /// Variance components supplied by the caller; `vbar` is zero.
    Known,
}

#[derive(Debug, Clone)]
pub struct VarianceFit {
    pub delta_hat: VarianceParams,
    pub beta_hat: DVector<f64>,
    /// Asymptotic covariance of `delta_hat`.
    pub vbar: DMatrix<f64>,
    pub method: EstimationMethod,
    pub iterations: usize,
    pub converged: bool,
    pub boundary_flags: Vec<bool>,
    /// Estimate before truncation or clamping (Henderson III may go negative).
    pub raw_delta: Vec<f64>,
    pub loglik: Option<f64>,
    pub warnings: Vec<String>,
}

impl VarianceFit {
    /// Fit with known variance components: GLS `beta` and zero `vbar`.
    pub fn known(dataset: &LmmDataset, structure: &dyn CovarianceStructure, delta: &VarianceParams) -> Result<Self> {
        let (beta, _) = gls_beta(dataset, structure, delta)?;
        let r = delta.len();
        Ok(Self {
            delta_hat: delta.clone(),
            beta_hat: beta,
            vbar: DMatrix::zeros(r, r),
            method: EstimationMethod::Known,
            iterations: 0,
            converged: true,
            boundary_flags: delta.values().iter().map(|v| *v == 0.0).collect(),
            raw_delta: delta.values().to_vec(),
            loglik: None,
            warnings: Vec::new(),
        })
    }

    pub fn any_boundary(&self) -> bool {
        self.boundary_flags.iter().any(|b| *b)
    }
}
