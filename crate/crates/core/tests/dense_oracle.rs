mod common;

use common::{dense_henderson, random_dataset, Dense};
use mixinf::covariance::{self, a_matrix, lambda_tilde, CovContext};
use mixinf::estimation::{
    extract_ce, fisher_info_derivative, gls_beta, reml_fisher_info, reml_score, restricted_loglik, EstimationMethod,
    VarianceFit,
};
use mixinf::model::{
    CovarianceStructure, IndependentEffectsStructure, LmmDataset, MixedTargets, NestedErrorStructure, VarianceParams,
};
use nalgebra::DMatrix;

const TOL: f64 = 1e-9;

fn close(label: &str, a: &DMatrix<f64>, b: &DMatrix<f64>) {
    let err = (a - b).amax();
    assert!(err < TOL, "{label}: max abs diff {err:e}\nfast = {a}\ndense = {b}");
}

struct Case {
    ds: LmmDataset,
    tg: MixedTargets,
    st: Box<dyn CovarianceStructure>,
    delta: VarianceParams,
}

fn cases() -> Vec<Case> {
    let mut out = Vec::new();
    for seed in 0..4u64 {
        let m = 3 + (seed as usize % 3);
        let (ds, tg) = random_dataset(seed, m, 4, 1, true);
        out.push(Case {
            ds,
            tg,
            st: Box::new(NestedErrorStructure),
            delta: VarianceParams::new(vec![0.7 + seed as f64, 1.3]).unwrap(),
        });
        let (ds, tg) = random_dataset(100 + seed, m, 4, 2, true);
        out.push(Case {
            ds,
            tg,
            st: Box::new(IndependentEffectsStructure { q: 2 }),
            delta: VarianceParams::new(vec![1.1, 0.4 + 0.1 * seed as f64, 0.9]).unwrap(),
        });
    }
    out
}

fn vbar_of(c: &Case) -> DMatrix<f64> {
    reml_fisher_info(&c.ds, c.st.as_ref(), &c.delta).unwrap().try_inverse().unwrap()
}

#[test]
fn likelihood_pieces_match_dense() {
    for c in cases() {
        let d = Dense::new(&c.ds, c.st.as_ref(), &c.tg, &c.delta);
        let (beta, f) = gls_beta(&c.ds, c.st.as_ref(), &c.delta).unwrap();
        close(
            "beta",
            &DMatrix::from_column_slice(beta.len(), 1, beta.as_slice()),
            &DMatrix::from_column_slice(beta.len(), 1, d.beta().as_slice()),
        );
        close("F", &f, &d.f.v);
        let ll = restricted_loglik(&c.ds, c.st.as_ref(), &c.delta).unwrap();
        assert!((ll - d.loglik()).abs() < TOL, "loglik {ll} vs {}", d.loglik());
        let s = reml_score(&c.ds, c.st.as_ref(), &c.delta).unwrap();
        assert!((s - d.score()).amax() < TOL);
        close("fisher", &reml_fisher_info(&c.ds, c.st.as_ref(), &c.delta).unwrap(), &d.fisher());
        for g in 0..d.r {
            close(
                "dfisher",
                &fisher_info_derivative(&c.ds, c.st.as_ref(), &c.delta, g).unwrap(),
                &d.fisher_derivative(g),
            );
        }
    }
}

#[test]
fn marginal_terms_match_dense() {
    for c in cases() {
        let d = Dense::new(&c.ds, c.st.as_ref(), &c.tg, &c.delta);
        let ctx = CovContext::new(&c.ds, c.st.as_ref(), &c.tg, &c.delta).unwrap();
        let vbar = vbar_of(&c);
        close("K1", &DMatrix::from_diagonal(&covariance::k1(&ctx, &c.ds, &c.tg)), &d.k1());
        close("K2", &covariance::k2(&ctx), &d.k2());
        close("K3", &DMatrix::from_diagonal(&covariance::k3_hat(&ctx, &c.ds, &vbar)), &d.k3(&vbar));
    }
}

#[test]
fn conditional_terms_match_dense() {
    for c in cases() {
        let d = Dense::new(&c.ds, c.st.as_ref(), &c.tg, &c.delta);
        let ctx = CovContext::new(&c.ds, c.st.as_ref(), &c.tg, &c.delta).unwrap();
        let vbar = vbar_of(&c);
        close("L1", &covariance::l1(&ctx), &d.l1());
        close("L2", &covariance::l2(&ctx), &d.l2());
        close("L4", &covariance::l4_hat(&ctx, &vbar), &d.l4(&vbar));
        close("L5", &covariance::l5_hat(&ctx, &vbar), &d.l5(&vbar));
        close("L3 REML", &covariance::l3_hat_reml(&ctx, &c.ds, &vbar), &d.l3_reml(&vbar));
    }
}

#[test]
fn henderson_l3_matches_dense() {
    for seed in 0..4u64 {
        let (ds, tg) = random_dataset(200 + seed, 4 + seed as usize % 2, 4, 1, false);
        let delta = VarianceParams::new(vec![0.8, 1.6]).unwrap();
        let d = Dense::new(&ds, &NestedErrorStructure, &tg, &delta);
        let ctx = CovContext::new(&ds, &NestedErrorStructure, &tg, &delta).unwrap();
        let ops = extract_ce(&ds).unwrap();
        let vbar = DMatrix::from_row_slice(2, 2, &[0.9, -0.2, -0.2, 0.3]);
        close("L3 H3", &covariance::l3_hat_h3(&ctx, &ds, &ops, &vbar), &d.l3_h3(&dense_henderson(&ds), &vbar));
    }
}

#[test]
fn a_matrix_and_lambda_match_dense() {
    for c in cases() {
        let d = Dense::new(&c.ds, c.st.as_ref(), &c.tg, &c.delta);
        let a = a_matrix(&c.ds, c.st.as_ref(), &c.tg, &c.delta).unwrap();
        close("A", &a.dense(), &d.a());
        let sigma = d.l1() + d.l2() + DMatrix::identity(d.m, d.m) * 0.05;
        let beta = d.beta();
        let fast = lambda_tilde(&a.lambda_inputs(&c.ds, &beta), &sigma).unwrap();
        let slow = d.lambda_tilde(&sigma, &beta);
        assert!((fast - slow).abs() < TOL * slow.abs().max(1.0), "lambda {fast} vs {slow}");
    }
}

#[test]
fn assembled_estimates_match_dense_sums() {
    for c in cases() {
        let d = Dense::new(&c.ds, c.st.as_ref(), &c.tg, &c.delta);
        // scaled so that the tiny-m estimates stay positive definite
        let vbar = vbar_of(&c) * 0.01;
        let (beta, _) = gls_beta(&c.ds, c.st.as_ref(), &c.delta).unwrap();
        let mut fit = VarianceFit::known(&c.ds, c.st.as_ref(), &c.delta).unwrap();
        fit.vbar = vbar.clone();
        fit.beta_hat = beta;
        fit.method = EstimationMethod::Reml;
        let marg = covariance::sigma_marginal(&c.ds, c.st.as_ref(), &c.tg, &fit).unwrap();
        let dense_marg = d.k1() + d.k2() + d.k3(&vbar) * 2.0;
        if !marg.clamped {
            close("Sigma", &marg.sigma, &dense_marg);
        }
        let cond = covariance::sigma_conditional(&c.ds, c.st.as_ref(), &c.tg, &fit).unwrap();
        let l3 = d.l3_reml(&vbar);
        let dense_cond = d.l1() + d.l2() + (&l3 + l3.transpose()) * 0.5 + d.l4(&vbar) - d.l5(&vbar);
        let mut total = cond.components[0].1.clone();
        for (_, m) in &cond.components[1..] {
            total += m;
        }
        close("Sigma_v components", &total, &dense_cond);
        if !cond.clamped {
            assert_eq!(total, cond.sigma);
        }
    }
}
