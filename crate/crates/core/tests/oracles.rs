//! Low-rank computations against dense reference implementations.

mod common;

use common::{close, dense_sigma, gauss_hermite, kernel, random_instance};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use vlgp::gp_prior::{KernelSpec, LatentPrior};
use vlgp::inference::{newton_mu, variances_from_w, NewtonOptions};
use vlgp::model::{elbo, LatentPosterior, ModelParams, SpikeData, TrialPosterior};

#[test]
fn elbo_matches_dense_computation() {
    for seed in 0..6 {
        let inst = random_instance(seed, 4, 20 + 8 * seed as usize, 1 + seed as usize % 2, seed as usize % 3, 2);
        let low_rank = elbo(&inst.data, &inst.params, &inst.posterior, &inst.priors).unwrap();
        let dense = inst.dense_elbo();
        assert!(close(low_rank, dense, 1e-8, 1.0), "seed {seed}: {low_rank} vs {dense}");
    }
}

#[test]
fn variances_match_dense_inverse() {
    for seed in 10..16 {
        let inst = random_instance(seed, 3, 60, 2, 0, 1);
        let dense = inst.dense_v(0);
        let low_rank = &inst.posterior.trials[0].v;
        for (a, b) in low_rank.iter().zip(dense.iter()) {
            assert!(close(*a, *b, 1e-6, 0.0), "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn newton_step_matches_dense_newton() {
    for seed in 20..26 {
        let inst = random_instance(seed, 5, 40, 2, 1, 1);
        for centered in [false, true] {
            let opts = NewtonOptions {
                center: centered,
                ..NewtonOptions::default()
            };
            for l in 0..2 {
                let post = &inst.posterior.trials[0];
                let out = newton_mu(l, inst.data.trial(0), &inst.params, post, inst.priors[l].factor(40), &opts, None)
                    .unwrap();
                let step = (&out.value - post.mu.column(l)) / out.step;
                let expected = common::dense_newton(&inst, l, centered);
                let scale = expected.amax();
                for (a, b) in step.iter().zip(expected.iter()) {
                    assert!((a - b).abs() <= 1e-6 * scale, "seed {seed} l {l} centered {centered}: {a} vs {b}");
                }
            }
        }
    }
}

/// `log ∫ Π_t exp(y_t log λ_t − λ_t) N(x; 0, K) dx` by tensor Gauss–Hermite
/// quadrature, for one neuron and one latent.
fn log_marginal(y: &[f64], alpha: f64, bias: f64, k: &DMatrix<f64>, nodes: usize) -> f64 {
    let (z, w) = gauss_hermite(nodes);
    let chol = k.clone().cholesky().unwrap().l();
    let len = y.len();
    let mut idx = vec![0usize; len];
    let mut total = 0.0;
    loop {
        let zv = DVector::from_fn(len, |i, _| z[idx[i]]);
        let x = &chol * zv;
        let weight: f64 = idx.iter().map(|&i| w[i]).product();
        let ll: f64 = (0..len)
            .map(|t| {
                let e = bias + alpha * x[t];
                y[t] * e - e.exp()
            })
            .sum();
        total += weight * ll.exp();
        let mut d = 0;
        loop {
            if d == len {
                return total.ln();
            }
            idx[d] += 1;
            if idx[d] < nodes {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

#[test]
fn elbo_is_below_quadrature_marginal_likelihood() {
    let len = 3;
    let (sigma2, omega) = (1.0, 0.3);
    let y = [1.0, 0.0, 2.0];
    let (alpha, bias) = (0.9, -0.2);
    let exact = log_marginal(&y, alpha, bias, &kernel(len, sigma2, omega), 48);
    // the quadrature itself is converged
    let coarse = log_marginal(&y, alpha, bias, &kernel(len, sigma2, omega), 36);
    assert!((exact - coarse).abs() < 1e-9, "{exact} vs {coarse}");

    let data = SpikeData::new(vec![DMatrix::from_column_slice(len, 1, &y)], 0.001, 0).unwrap();
    let params = ModelParams::new(DMatrix::from_element(1, 1, alpha), DMatrix::from_element(1, 1, bias)).unwrap();
    let priors = vec![LatentPrior::new(KernelSpec::new(sigma2, omega).unwrap(), 1e-15, len, &[len]).unwrap()];
    let mut best = f64::NEG_INFINITY;
    for scale in [0.0, 0.3, 1.0] {
        for wv in [0.0, 0.5, 2.0] {
            let mu = DMatrix::from_fn(len, 1, |t, _| scale * (t as f64 - 1.0));
            let w = DMatrix::from_element(len, 1, wv);
            let v = variances_from_w(&w, &priors).unwrap();
            let post = LatentPosterior {
                trials: vec![TrialPosterior { mu, w, v }],
            };
            let bound = elbo(&data, &params, &post, &priors).unwrap();
            assert!(bound <= exact + 1e-10, "bound {bound} above log p(y) {exact}");
            best = best.max(bound);
        }
    }
    assert!(exact - best < 0.5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stored_variances_follow_w(
        len in 2usize..50,
        sigma2 in 0.3f64..3.0,
        omega in 0.05f64..0.5,
        w in proptest::collection::vec(0.0f64..20.0, 50),
    ) {
        let prior = LatentPrior::new(KernelSpec::new(sigma2, omega).unwrap(), 1e-15, len, &[len]).unwrap();
        let w = DMatrix::from_column_slice(len, 1, &w[..len]);
        let v = variances_from_w(&w, std::slice::from_ref(&prior)).unwrap();
        let dense = dense_sigma(&kernel(len, sigma2, omega), &w.column(0).into_owned());
        for t in 0..len {
            prop_assert!(v[(t, 0)] > 0.0);
            prop_assert!(close(v[(t, 0)], dense[(t, t)], 1e-6, 0.0), "{} vs {}", v[(t, 0)], dense[(t, t)]);
        }
    }
}
