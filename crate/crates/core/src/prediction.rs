//! BLUP weights, BLUP/EBLUP of mixed parameters and weight derivatives.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{LmmError, Result};
use crate::estimation::{BlockState, VarianceFit};
use crate::model::{CovarianceStructure, LmmDataset, MixedTargets, VarianceParams};

/// BLUP weights `b_i`, fixed-effect remainders `d_i = l_i - X_i'b_i` and
/// first derivatives `db_i` (column `e` is `d b_i / d delta_e`).
#[derive(Debug, Clone)]
pub struct BlupComponents {
    pub b: Vec<DVector<f64>>,
    pub d: Vec<DVector<f64>>,
    pub db: Vec<DMatrix<f64>>,
}

impl BlupComponents {
    pub fn from_state(dataset: &LmmDataset, st: &BlockState, targets: &MixedTargets) -> Result<Self> {
        targets.check_against(dataset)?;
        let r = st.n_params();
        let mut b = Vec::with_capacity(dataset.m());
        let mut d = Vec::with_capacity(dataset.m());
        let mut db = Vec::with_capacity(dataset.m());
        for ((blk, bc), h) in dataset.blocks().iter().zip(&st.blocks).zip(&targets.h) {
            let bi = &bc.w * (&blk.z * (&st.g * h));
            let mut dbi = DMatrix::zeros(blk.n(), r);
            for e in 0..r {
                let col = &bc.w * (&blk.z * (&st.dg[e] * h)) - &bc.w * (&bc.dv[e] * &bi);
                dbi.set_column(e, &col);
            }
            b.push(bi);
            db.push(dbi);
        }
        for ((blk, l), bi) in dataset.blocks().iter().zip(&targets.l).zip(&b) {
            d.push(l - blk.x.transpose() * bi);
        }
        Ok(Self { b, d, db })
    }

    /// `d^2 b_i / d delta_e d delta_g`, valid for structures linear in delta.
    pub fn second_derivative(&self, st: &BlockState, i: usize, e: usize, g: usize) -> DVector<f64> {
        let bc = &st.blocks[i];
        let de = self.db[i].column(e);
        let dg = self.db[i].column(g);
        -(&bc.w * (&bc.dv[g] * de)) - &bc.w * (&bc.dv[e] * dg)
    }
}

pub fn blup_components(
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    targets: &MixedTargets,
    delta: &VarianceParams,
) -> Result<BlupComponents> {
    let st = BlockState::new(dataset, structure, delta)?;
    BlupComponents::from_state(dataset, &st, targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    Blup,
    Eblup,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub values: DVector<f64>,
    pub delta_used: VarianceParams,
    pub kind: PredictionKind,
    /// Convergence flag of the fit behind an EBLUP (always true for a BLUP).
    pub converged: bool,
    pub boundary: bool,
}

/// `mu_tilde_i = l_i' beta + b_i'(y_i - X_i beta)`.
pub fn blup_from_components(
    dataset: &LmmDataset,
    targets: &MixedTargets,
    comp: &BlupComponents,
    beta: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_iterator(
        dataset.m(),
        dataset
            .blocks()
            .iter()
            .zip(&targets.l)
            .zip(&comp.b)
            .map(|((blk, l), b)| l.dot(beta) + b.dot(&(&blk.y - &blk.x * beta))),
    )
}

pub fn blup(
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    targets: &MixedTargets,
    delta: &VarianceParams,
    beta: &DVector<f64>,
) -> Result<Prediction> {
    if beta.len() != dataset.p() {
        return Err(LmmError::Dimension { expected: dataset.p(), got: beta.len() });
    }
    let comp = blup_components(dataset, structure, targets, delta)?;
    Ok(Prediction {
        values: blup_from_components(dataset, targets, &comp, beta),
        delta_used: delta.clone(),
        kind: PredictionKind::Blup,
        converged: true,
        boundary: delta.values().contains(&0.0),
    })
}

/// BLUP evaluated at `delta_hat` and `beta_hat(delta_hat)`.
pub fn eblup(
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    targets: &MixedTargets,
    fit: &VarianceFit,
) -> Result<Prediction> {
    let mut pred = blup(dataset, structure, targets, &fit.delta_hat, &fit.beta_hat)?;
    pred.kind = PredictionKind::Eblup;
    pred.converged = fit.converged;
    pred.boundary = fit.any_boundary();
    Ok(pred)
}
