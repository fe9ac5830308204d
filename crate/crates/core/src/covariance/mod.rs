//! m x m covariance estimators for `mu_hat - mu` under the marginal and the
//! conditional law, plus the non-centrality estimate used by conditional sets.

pub mod amatrix;
pub mod conditional;
pub mod marginal;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::estimation::{BlockState, EstimationMethod};
use crate::model::{CovarianceStructure, LmmDataset, MixedTargets, VarianceParams};
use crate::numerics::linalg;
use crate::prediction::BlupComponents;

pub use amatrix::{a_matrix, lambda_hat, lambda_tilde, oracle_lambda, AMatrix};
pub use conditional::{l1, l2, l3_hat_h3, l3_hat_reml, l4_hat, l5_hat, sigma_conditional, WDerivatives};
pub use marginal::{k1, k2, k3_hat, sigma_marginal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Law {
    Marginal,
    Conditional,
}

/// Summaries from which the non-centrality estimate can be recomputed for
/// any linear transformation of the mixed parameters: `A y`, `A R A'` and
/// `A X beta`.
#[derive(Debug, Clone)]
pub struct LambdaInputs {
    pub a_y: DVector<f64>,
    pub a_r_at: DMatrix<f64>,
    pub a_x_beta: DVector<f64>,
}

impl LambdaInputs {
    /// Inputs for `L mu` instead of `mu`.
    pub fn transformed(&self, l: &DMatrix<f64>) -> Self {
        Self {
            a_y: l * &self.a_y,
            a_r_at: linalg::symmetrized(&(l * &self.a_r_at * l.transpose())),
            a_x_beta: l * &self.a_x_beta,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CovEstimate {
    pub sigma: DMatrix<f64>,
    pub law: Law,
    /// `max(0, lambda_tilde)`; conditional law only.
    pub lambda_hat: Option<f64>,
    pub lambda_tilde: Option<f64>,
    /// Named terms whose ordered sum is `sigma` (before any PSD repair).
    pub components: Vec<(String, DMatrix<f64>)>,
    pub delta_used: VarianceParams,
    pub method: EstimationMethod,
    /// True when eigenvalues were lifted to restore positive definiteness.
    pub clamped: bool,
    pub lambda_inputs: Option<LambdaInputs>,
}

impl CovEstimate {
    pub fn m(&self) -> usize {
        self.sigma.nrows()
    }

    pub(crate) fn assemble(
        components: Vec<(String, DMatrix<f64>)>,
        law: Law,
        delta: &VarianceParams,
        method: EstimationMethod,
    ) -> Result<Self> {
        let mut total = components[0].1.clone();
        for (_, c) in &components[1..] {
            total += c;
        }
        let (sigma, clamped) = linalg::psd_clamp(&total)?;
        Ok(Self {
            sigma,
            law,
            lambda_hat: None,
            lambda_tilde: None,
            components,
            delta_used: delta.clone(),
            method,
            clamped,
            lambda_inputs: None,
        })
    }
}

/// Block state and BLUP pieces shared by all covariance terms.
#[derive(Debug, Clone)]
pub struct CovContext {
    pub state: BlockState,
    pub comp: BlupComponents,
}

impl CovContext {
    pub fn new(
        dataset: &LmmDataset,
        structure: &dyn CovarianceStructure,
        targets: &MixedTargets,
        delta: &VarianceParams,
    ) -> Result<Self> {
        let state = BlockState::new(dataset, structure, delta)?;
        let comp = BlupComponents::from_state(dataset, &state, targets)?;
        Ok(Self { state, comp })
    }

    pub fn m(&self) -> usize {
        self.state.m()
    }

    /// `D = [d_1, ..., d_m]`, p x m.
    pub fn d_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_columns(&self.comp.d)
    }
}
