//! REML by Fisher scoring with step halving and a floor on each component.

use nalgebra::{DMatrix, DVector};

use super::state::{fisher_from_state, loglik_from_state, score_from_state, BlockState};
use super::{EstimationMethod, VarianceFit};
use crate::error::{LmmError, Result};
use crate::model::{CovarianceStructure, LmmDataset, VarianceParams};
use crate::numerics::linalg;

#[derive(Debug, Clone)]
pub struct RemlOptions {
    /// Starting point; defaults to the OLS residual variance split evenly.
    pub start: Option<VarianceParams>,
    /// Additional candidate starts. Scoring begins at the candidate with the
    /// largest restricted log-likelihood.
    pub extra_starts: Vec<VarianceParams>,
    /// Convergence threshold on the sup-norm of the projected score.
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Lower bound for every component.
    pub floor: f64,
}

impl Default for RemlOptions {
    fn default() -> Self {
        Self { start: None, extra_starts: Vec::new(), tol: 1e-8, max_iter: 100, max_halvings: 30, floor: 1e-10 }
    }
}

fn default_start(dataset: &LmmDataset, r: usize) -> Result<VarianceParams> {
    let x = dataset.stacked_x();
    let y = dataset.stacked_y();
    let xtx = x.transpose() * &x;
    let beta = xtx.cholesky().ok_or_else(|| LmmError::Rank("X'X is singular".into()))?.solve(&(x.transpose() * &y));
    let resid = &y - &x * beta;
    let dof = (dataset.n() - dataset.p()).max(1) as f64;
    let s2 = (resid.norm_squared() / dof).max(1e-8);
    VarianceParams::new(vec![s2 / r as f64; r])
}

/// Components pinned at the floor with a score pushing them further down
/// do not count against convergence.
fn projected(score: &DVector<f64>, delta: &[f64], floor: f64) -> DVector<f64> {
    DVector::from_fn(score.len(), |e, _| if delta[e] <= floor && score[e] < 0.0 { 0.0 } else { score[e] })
}

/// Fisher step restricted to the components not held at the floor. A
/// component at the floor is held when the unrestricted step would push it
/// further down.
fn scoring_step(info: &DMatrix<f64>, score: &DVector<f64>, delta: &[f64], floor: f64) -> DVector<f64> {
    let r = score.len();
    let mut free: Vec<usize> = (0..r).collect();
    loop {
        let k = free.len();
        let sub = DMatrix::from_fn(k, k, |a, b| info[(free[a], free[b])]);
        let (inv, _) = linalg::sym_pinv(&sub);
        let sub_step = inv * DVector::from_fn(k, |a, _| score[free[a]]);
        let mut step = DVector::zeros(r);
        for (a, &e) in free.iter().enumerate() {
            step[e] = sub_step[a];
        }
        let before = free.len();
        free.retain(|&e| !(delta[e] <= floor && step[e] < 0.0));
        if free.is_empty() {
            return DVector::zeros(r);
        }
        if free.len() == before {
            return step;
        }
    }
}

pub fn fit_reml(
    dataset: &LmmDataset,
    structure: &dyn CovarianceStructure,
    options: &RemlOptions,
) -> Result<VarianceFit> {
    let r = structure.n_params();
    let floor = options.floor;
    let mut candidates = vec![match &options.start {
        Some(s) => s.clone(),
        None => default_start(dataset, r)?,
    }];
    candidates.extend(options.extra_starts.iter().cloned());

    let mut best: Option<(Vec<f64>, BlockState, f64)> = None;
    for c in &candidates {
        if c.len() != r {
            return Err(LmmError::Dimension { expected: r, got: c.len() });
        }
        let d: Vec<f64> = c.values().iter().map(|v| v.max(floor)).collect();
        let st = match BlockState::new(dataset, structure, &VarianceParams::new(d.clone())?) {
            Ok(st) => st,
            Err(_) => continue,
        };
        let ll = loglik_from_state(&st, dataset);
        if best.as_ref().is_none_or(|b| ll > b.2) {
            best = Some((d, st, ll));
        }
    }
    let (mut delta, mut st, mut ll) =
        best.ok_or_else(|| LmmError::Numeric("no admissible starting point for REML".into()))?;

    let start = (delta.clone(), st.clone(), ll);
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut info = fisher_from_state(&st);
    while iterations < options.max_iter {
        let score = score_from_state(&st);
        let proj = projected(&score, &delta, floor);
        if proj.amax() < options.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let step = scoring_step(&info, &score, &delta, floor);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=options.max_halvings {
            let cand: Vec<f64> = (0..r).map(|e| (delta[e] + scale * step[e]).max(floor)).collect();
            if let Ok(cst) = BlockState::new(dataset, structure, &VarianceParams::new(cand.clone())?) {
                let cll = loglik_from_state(&cst, dataset);
                if cll >= ll - 1e-13 * ll.abs().max(1.0) {
                    accepted = Some((cand, cst, cll));
                    break;
                }
            }
            scale *= 0.5;
        }
        match accepted {
            Some((d, s, l)) => {
                let moved = d.iter().zip(&delta).any(|(a, b)| a != b);
                delta = d;
                st = s;
                ll = l;
                info = fisher_from_state(&st);
                if !moved {
                    warnings.push("scoring step did not move the estimate".into());
                    break;
                }
            }
            None => {
                warnings.push("step halving failed to increase the restricted likelihood".into());
                break;
            }
        }
    }
    // steps are accepted up to rounding noise in the likelihood; never hand
    // back a point below the best starting candidate
    if ll < start.2 {
        (delta, st, ll) = start;
        info = fisher_from_state(&st);
        converged = projected(&score_from_state(&st), &delta, floor).amax() < options.tol;
    }
    if !converged && iterations >= options.max_iter {
        warnings.push(format!("REML did not converge in {} iterations", options.max_iter));
    }
    let (vbar, singular) = linalg::sym_pinv(&info);
    if singular {
        warnings.push("Fisher information is singular; V-bar is a pseudo-inverse".into());
    }
    let boundary_flags: Vec<bool> = delta.iter().map(|v| *v <= floor).collect();
    Ok(VarianceFit {
        delta_hat: VarianceParams::new(delta.clone())?,
        beta_hat: st.beta.clone(),
        vbar,
        method: EstimationMethod::Reml,
        iterations,
        converged,
        boundary_flags,
        raw_delta: delta,
        loglik: Some(ll),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::state::reml_score;
    use crate::model::{NerRow, NerSpec, NestedErrorStructure};

    fn toy(v: &[f64], noise: &[f64], n_i: usize) -> LmmDataset {
        let mut rows = Vec::new();
        for (i, vi) in v.iter().enumerate() {
            for j in 0..n_i {
                let e = noise[(i * n_i + j) % noise.len()];
                rows.push(NerRow { cluster: format!("c{i}"), y: 1.0 + vi + e, x: vec![1.0] });
            }
        }
        crate::model::build_ner(&NerSpec { rows }).unwrap().0
    }

    #[test]
    fn interior_optimum_has_small_score() {
        let v = [-2.0, 1.5, 0.3, 2.2, -0.9, -1.4, 0.8, 0.1];
        let noise = [0.3, -0.5, 0.9, -0.2, 0.1, -0.7, 0.4];
        let ds = toy(&v, &noise, 4);
        let fit = fit_reml(&ds, &NestedErrorStructure, &RemlOptions::default()).unwrap();
        assert!(fit.converged, "{:?}", fit.warnings);
        let s = reml_score(&ds, &NestedErrorStructure, &fit.delta_hat).unwrap();
        assert!(s.amax() < 1e-8);
        assert!(!fit.any_boundary());
    }

    #[test]
    fn no_cluster_effect_hits_floor() {
        let v = [0.0; 6];
        // within-cluster spread only, identical cluster means
        let noise = [3.0, -3.0, 2.0, -2.0];
        let ds = toy(&v, &noise, 4);
        let fit = fit_reml(&ds, &NestedErrorStructure, &RemlOptions::default()).unwrap();
        assert!(fit.converged, "{:?} {:?} it={}", fit.warnings, fit.delta_hat, fit.iterations);
        assert!(fit.boundary_flags[0]);
        assert_eq!(fit.delta_hat.get(0), 1e-10);
    }

    #[test]
    fn never_worse_than_candidate() {
        let v = [-1.0, 0.5, 0.2, 0.9];
        let noise = [0.5, -0.1, 0.3, -0.6, 0.8];
        let ds = toy(&v, &noise, 3);
        let truth = VarianceParams::new(vec![0.7, 0.3]).unwrap();
        let opts = RemlOptions { extra_starts: vec![truth.clone()], ..Default::default() };
        let fit = fit_reml(&ds, &NestedErrorStructure, &opts).unwrap();
        let l0 = crate::estimation::restricted_loglik(&ds, &NestedErrorStructure, &truth).unwrap();
        assert!(fit.loglik.unwrap() >= l0);
    }
}
