//! Dense reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use vlgp::gp_prior::{KernelSpec, LatentPrior};
use vlgp::inference::variances_from_w;
use vlgp::model::{rate_exponent, LatentPosterior, ModelParams, SpikeData, TrialPosterior};

/// `σ² exp(−ω (t−s)²)` evaluated directly.
pub fn kernel(len: usize, sigma2: f64, omega: f64) -> DMatrix<f64> {
    DMatrix::from_fn(len, len, |i, j| {
        let d = i as f64 - j as f64;
        sigma2 * (-omega * d * d).exp()
    })
}

pub fn inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("oracle matrix is invertible")
}

/// `(K⁻¹ + diag(w))⁻¹ = K − K S (I + S K S)⁻¹ S K` with `S = diag(√w)`,
/// which avoids inverting `K`.
pub fn dense_sigma(k: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let s = DMatrix::from_diagonal(&w.map(f64::sqrt));
    let inner = DMatrix::identity(k.nrows(), k.nrows()) + &s * k * &s;
    k - k * &s * inverse(&inner) * &s * k
}

pub fn logdet(m: &DMatrix<f64>) -> f64 {
    let chol = m.clone().cholesky().expect("oracle matrix is positive definite");
    2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// `KL(N(μ, Σ) ‖ N(0, K))` with `Σ = (K⁻¹ + W)⁻¹` and `μ = K c`:
/// `½ [cᵀKc + T − tr((I+SKS)⁻¹SKS) + log det(I+SKS) − T]`.
pub fn dense_kl(k: &DMatrix<f64>, c: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let s = DMatrix::from_diagonal(&w.map(f64::sqrt));
    let sks = &s * k * &s;
    let inner = DMatrix::identity(k.nrows(), k.nrows()) + &sks;
    let trace = (inverse(&inner) * &sks).trace();
    0.5 * ((c.transpose() * k * c)[0] - trace + logdet(&inner))
}

/// A small random instance with posteriors in the span of the prior.
pub struct Instance {
    pub data: SpikeData,
    pub params: ModelParams,
    pub posterior: LatentPosterior,
    pub priors: Vec<LatentPrior>,
    /// `(σ², ω)` per latent.
    pub kernels: Vec<(f64, f64)>,
    /// Per trial, `c` with `μ_l = K_l c_l` (`T×L`).
    pub coef: Vec<DMatrix<f64>>,
}

impl Instance {
    pub fn dense_kernel(&self, l: usize, len: usize) -> DMatrix<f64> {
        kernel(len, self.kernels[l].0, self.kernels[l].1)
    }

    /// Variances recomputed densely from the stored `W`.
    pub fn dense_v(&self, k: usize) -> DMatrix<f64> {
        let post = &self.posterior.trials[k];
        let len = post.len();
        let mut v = DMatrix::zeros(len, post.latent_dim());
        for l in 0..post.latent_dim() {
            let sigma = dense_sigma(&self.dense_kernel(l, len), &post.w.column(l).into_owned());
            v.set_column(l, &sigma.diagonal());
        }
        v
    }

    /// The bound computed with dense matrices only.
    pub fn dense_elbo(&self) -> f64 {
        let mut total = 0.0;
        for (k, (trial, post)) in self.data.trials().iter().zip(&self.posterior.trials).enumerate() {
            let v = self.dense_v(k);
            for n in 0..self.params.n_neurons() {
                let h = trial.history.neuron(n);
                for t in 0..trial.len() {
                    let mut lin = 0.0;
                    for j in 0..h.ncols() {
                        lin += self.params.beta[(n, j)] * h[(t, j)];
                    }
                    let mut var = 0.0;
                    for l in 0..self.params.latent_dim() {
                        let a = self.params.alpha[(n, l)];
                        lin += a * post.mu[(t, l)];
                        var += 0.5 * a * a * v[(t, l)];
                    }
                    total += trial.counts[(t, n)] * lin - (lin + var).exp();
                }
            }
            for l in 0..self.params.latent_dim() {
                let kl = dense_kl(
                    &self.dense_kernel(l, trial.len()),
                    &self.coef[k].column(l).into_owned(),
                    &post.w.column(l).into_owned(),
                );
                total -= kl;
            }
        }
        total
    }
}

/// Dense Newton direction `H⁻¹ ∇` for latent `l` of trial 0, optionally
/// constrained to keep the mean of `μ_l` at zero (KKT system).
pub fn dense_newton(inst: &Instance, l: usize, centered: bool) -> DVector<f64> {
    let trial = inst.data.trial(0);
    let post = &inst.posterior.trials[0];
    let len = trial.len();
    let k = inst.dense_kernel(l, len);
    let kinv = inverse(&k);
    let e = rate_exponent(trial, &inst.params, post);
    let mut grad = -(&kinv * post.mu.column(l));
    let mut hess = kinv.clone();
    for n in 0..inst.params.n_neurons() {
        let a = inst.params.alpha[(n, l)];
        for t in 0..len {
            let lam = e[(t, n)].exp();
            grad[t] += (trial.counts[(t, n)] - lam) * a;
            hess[(t, t)] += lam * a * a;
        }
    }
    if !centered {
        return hess.lu().solve(&grad).unwrap();
    }
    let mut kkt = DMatrix::zeros(len + 1, len + 1);
    kkt.view_mut((0, 0), (len, len)).copy_from(&hess);
    for t in 0..len {
        kkt[(t, len)] = 1.0;
        kkt[(len, t)] = 1.0;
    }
    let mut rhs = DVector::zeros(len + 1);
    rhs.rows_mut(0, len).copy_from(&grad);
    rhs[len] = -post.mu.column(l).sum();
    kkt.lu().solve(&rhs).unwrap().rows(0, len).into_owned()
}

/// Random model instance: `trials` trials of `len` bins, `n` neurons, `l`
/// latents, history order `p`. Kernels are kept well conditioned so that the
/// dense oracles are accurate.
pub fn random_instance(seed: u64, n: usize, len: usize, l: usize, p: usize, trials: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    let kernels: Vec<(f64, f64)> = (0..l)
        .map(|_| (rng.random_range(0.5..2.0), rng.random_range(0.08..0.4)))
        .collect();
    let priors: Vec<LatentPrior> = kernels
        .iter()
        .map(|&(s, o)| LatentPrior::new(KernelSpec::new(s, o).unwrap(), 1e-15, len, &[len]).unwrap())
        .collect();
    let alpha = DMatrix::from_fn(n, l, |_, _| 0.5 * std.sample(&mut rng));
    let beta = DMatrix::from_fn(n, 1 + p, |_, j| if j == 0 { -0.5 + 0.3 * std.sample(&mut rng) } else { -0.1 * rng.random::<f64>() });
    let params = ModelParams::new(alpha, beta).unwrap();
    let mut posts = vec![];
    let mut counts = vec![];
    let mut coef = vec![];
    for _ in 0..trials {
        let mut cs = DMatrix::zeros(len, l);
        let mut mu = DMatrix::zeros(len, l);
        let mut w = DMatrix::zeros(len, l);
        for j in 0..l {
            let k = kernel(len, kernels[j].0, kernels[j].1);
            let c = DVector::from_fn(len, |_, _| 0.2 * std.sample(&mut rng));
            mu.set_column(j, &(&k * &c));
            cs.set_column(j, &c);
            for t in 0..len {
                w[(t, j)] = rng.random_range(0.0..3.0);
            }
        }
        let v = variances_from_w(&w, &priors).unwrap();
        let lam = (&mu * params.alpha.transpose()).map(|x| (x - 0.5).exp());
        counts.push(lam.map(|r| Poisson::new(r).unwrap().sample(&mut rng)));
        posts.push(TrialPosterior { mu, w, v });
        coef.push(cs);
    }
    Instance {
        data: SpikeData::new(counts, 0.001, p).unwrap(),
        params,
        posterior: LatentPosterior { trials: posts },
        priors,
        kernels,
        coef,
    }
}

/// Nodes and weights for `∫ f(z) N(z; 0, 1) dz` (Golub–Welsch on the
/// probabilists' Hermite recurrence).
pub fn gauss_hermite(m: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(m, m, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..m)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff<F: FnMut(&DVector<f64>) -> f64>(mut f: F, x: &DVector<f64>, i: usize, h: f64) -> f64 {
    let mut up = x.clone();
    up[i] += h;
    let mut down = x.clone();
    down[i] -= h;
    (f(&up) - f(&down)) / (2.0 * h)
}

/// `|a − b| ≤ rtol · max(|a|, |b|, floor)`.
pub fn close(a: f64, b: f64, rtol: f64, floor: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()).max(floor)
}

/// Largest scaled discrepancy `|a − fd| / max(|a|, |fd|, 1e-3)` between
/// analytic gradients and central differences, per parameter group.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientErrors {
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub log_sigma2: f64,
    pub log_omega: f64,
}

impl GradientErrors {
    pub fn max(&self) -> f64 {
        [self.mu, self.alpha, self.beta, self.log_sigma2, self.log_omega]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

const FD_STEP: f64 = 1e-5;

/// Instance used by the gradient checks, varied by `seed`.
pub fn gradient_instance(seed: u64) -> Instance {
    let len = 8 + (seed as usize * 3) % 17;
    random_instance(100 + seed, 3 + seed as usize % 3, len, 1 + seed as usize % 2, seed as usize % 3, 1 + seed as usize % 2)
}

/// `−KL(N(μ, Σ) ‖ N(0, K(θ)))` up to terms constant in `θ`, computed densely.
/// `jitter` is added to the diagonal of `K(θ)` and held fixed.
pub fn dense_prior_term(mu: &DVector<f64>, sigma: &DMatrix<f64>, theta: [f64; 2], jitter: f64) -> f64 {
    let mut k = kernel(mu.len(), theta[0].exp(), theta[1].exp());
    k += DMatrix::identity(mu.len(), mu.len()) * jitter;
    let kinv = inverse(&k);
    -0.5 * ((&kinv * sigma).trace() + (mu.transpose() * &kinv * mu)[0] + logdet(&k))
}

/// Checks `elbo_gradient` in `μ`, `α`, `β` against differences of `elbo`,
/// and the windowed hyperparameter gradient against differences of a dense
/// frozen-posterior objective. Panics if the windowed value disagrees with
/// the dense one.
pub fn gradient_errors(inst: &Instance) -> GradientErrors {
    use vlgp::gp_prior::KernelSpec;
    use vlgp::inference::{Window, WindowObjective};
    use vlgp::model::{elbo, elbo_gradient};

    let mut errs = GradientErrors::default();
    let grad = elbo_gradient(&inst.data, &inst.params, &inst.posterior, &inst.priors).unwrap();
    for (k, post) in inst.posterior.trials.iter().enumerate() {
        let len = post.len();
        for l in 0..post.latent_dim() {
            let x0 = post.mu.column(l).into_owned();
            for t in [0, len / 2, len - 1] {
                let f = |x: &DVector<f64>| {
                    let mut post = inst.posterior.clone();
                    post.trials[k].mu.set_column(l, x);
                    elbo(&inst.data, &inst.params, &post, &inst.priors).unwrap()
                };
                errs.mu = errs.mu.max(rel_err(grad.mu[k][(t, l)], central_diff(f, &x0, t, FD_STEP)));
            }
        }
    }
    let n = inst.params.n_neurons();
    let a0 = DVector::from_column_slice(inst.params.alpha.as_slice());
    for i in 0..a0.len() {
        let f = |x: &DVector<f64>| {
            let mut params = inst.params.clone();
            params.alpha = DMatrix::from_column_slice(n, params.latent_dim(), x.as_slice());
            elbo(&inst.data, &params, &inst.posterior, &inst.priors).unwrap()
        };
        errs.alpha = errs.alpha.max(rel_err(grad.alpha.as_slice()[i], central_diff(f, &a0, i, FD_STEP)));
    }
    let b0 = DVector::from_column_slice(inst.params.beta.as_slice());
    for i in 0..b0.len() {
        let f = |x: &DVector<f64>| {
            let mut params = inst.params.clone();
            params.beta = DMatrix::from_column_slice(n, params.beta.ncols(), x.as_slice());
            elbo(&inst.data, &params, &inst.posterior, &inst.priors).unwrap()
        };
        errs.beta = errs.beta.max(rel_err(grad.beta.as_slice()[i], central_diff(f, &b0, i, FD_STEP)));
    }

    let (sigma2, omega) = inst.kernels[0];
    let spec = KernelSpec::new(sigma2, omega).unwrap();
    let jitter = spec.for_dense().jitter;
    let post = &inst.posterior.trials[0];
    // Short windows keep the dense kernel comfortably invertible.
    let len = post.len().min(8);
    let windows: Vec<Window> = (0..=post.len() - len)
        .step_by(3)
        .map(|s| Window {
            mu: post.mu.view((s, 0), (len, 1)).column(0).into_owned(),
            w: post.w.view((s, 0), (len, 1)).column(0).into_owned(),
        })
        .collect();
    let objective = WindowObjective::new(&windows, &spec);
    let theta = [sigma2.ln() + 0.3, omega.ln() - 0.2];
    let analytic = objective.gradient(theta).unwrap();
    let k0 = kernel(len, sigma2, omega) + DMatrix::identity(len, len) * jitter;
    let frozen: Vec<DMatrix<f64>> = windows.iter().map(|w| dense_sigma(&k0, &w.w)).collect();
    let dense = |th: &DVector<f64>| {
        windows
            .iter()
            .zip(&frozen)
            .map(|(w, s)| dense_prior_term(&w.mu, s, [th[0], th[1]], jitter))
            .sum::<f64>()
            / windows.len() as f64
    };
    let x0 = DVector::from_column_slice(&theta);
    let value = objective.value(theta).unwrap();
    assert!(close(value, dense(&x0), 1e-8, 1.0), "windowed value {value} vs dense {}", dense(&x0));
    errs.log_sigma2 = rel_err(analytic[0], central_diff(&dense, &x0, 0, FD_STEP));
    errs.log_omega = rel_err(analytic[1], central_diff(&dense, &x0, 1, FD_STEP));
    errs
}
