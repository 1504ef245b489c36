//! Kernel hyperparameter updates on short random windows of the posterior.
//!
//! On each window the prior is dense: `K_w` is materialized with jitter and
//! the posterior covariance is rebuilt from stored `W` as
//! `Σ_w = (K_w⁻¹ + W_w)⁻¹`. With `μ_w` and `Σ_w` held fixed, the bound's
//! dependence on the kernel is
//! `F(K) = −½ [μᵀK⁻¹μ + tr(K⁻¹Σ) + log det K]`, whose gradient is
//! `∂F/∂K = ½ (K⁻¹μμᵀK⁻¹ + K⁻¹ΣK⁻¹ − K⁻¹)`. Ascent runs in
//! `(log σ², log ω)`.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_prior::{dense_kernel, kernel_log_grads, KernelSpec};
use crate::model::TrialPosterior;

pub const OMEGA_BOUNDS: (f64, f64) = (1e-8, 1.0);
pub const SIGMA2_BOUNDS: (f64, f64) = (1e-6, 1e6);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperOptions {
    pub subsample_len: usize,
    pub n_subsamples: usize,
    /// Gradient-ascent iterations per hyperparameter step.
    pub iters: usize,
    /// Largest move in log-parameter space per ascent iteration.
    pub max_log_step: f64,
}

impl Default for HyperOptions {
    fn default() -> Self {
        HyperOptions {
            subsample_len: 100,
            n_subsamples: 20,
            iters: 20,
            max_log_step: 1.0,
        }
    }
}

/// One temporal subsample of a single latent.
#[derive(Debug, Clone)]
pub struct Window {
    pub mu: DVector<f64>,
    pub w: DVector<f64>,
}

/// Draws windows of latent `l` uniformly: trial first, then start bin.
pub fn draw_windows<R: Rng>(trials: &[TrialPosterior], l: usize, opts: &HyperOptions, rng: &mut R) -> Vec<Window> {
    if trials.is_empty() {
        return Vec::new();
    }
    (0..opts.n_subsamples)
        .map(|_| {
            let post = &trials[rng.random_range(0..trials.len())];
            let len = opts.subsample_len.min(post.len()).max(1);
            let start = rng.random_range(0..=post.len() - len);
            Window {
                mu: post.mu.view((start, l), (len, 1)).column(0).into_owned(),
                w: post.w.view((start, l), (len, 1)).column(0).into_owned(),
            }
        })
        .collect()
}

/// `(K⁻¹ + diag(w))⁻¹ = K − K S (I + S K S)⁻¹ S K` with `S = diag(√w)`.
pub fn window_covariance(k: &DMatrix<f64>, w: &DVector<f64>) -> Option<DMatrix<f64>> {
    let n = k.nrows();
    let s = w.map(|x| x.max(0.0).sqrt());
    let sk = DMatrix::from_fn(n, n, |i, j| s[i] * k[(i, j)]);
    let mut inner = DMatrix::from_fn(n, n, |i, j| sk[(i, j)] * s[j]);
    for i in 0..n {
        inner[(i, i)] += 1.0;
    }
    let chol = inner.cholesky()?;
    let solved = chol.solve(&sk);
    let sigma = k - sk.tr_mul(&solved);
    Some((&sigma + sigma.transpose()) * 0.5)
}

/// The windowed objective with `μ_w` and `Σ_w` frozen.
///
/// Windows of equal length share `K_w`, so each group only needs the summed
/// second moment `A = Σ_w (μ_w μ_wᵀ + Σ_w)`; the group's contribution is
/// `−½ [tr(K⁻¹A) + m log det K]`.
#[derive(Debug, Clone)]
pub struct WindowObjective {
    groups: Vec<(usize, DMatrix<f64>)>,
    n_windows: usize,
    jitter: f64,
    pub skipped: usize,
}

impl WindowObjective {
    /// Freezes `Σ_w` at the kernel `spec`. Windows whose jittered kernel is
    /// not positive definite are skipped with a warning.
    pub fn new(windows: &[Window], spec: &KernelSpec) -> Self {
        let dense = spec.for_dense();
        let mut groups: BTreeMap<usize, (usize, DMatrix<f64>)> = BTreeMap::new();
        let mut kernels: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
        let mut skipped = 0;
        for win in windows {
            let len = win.mu.len();
            let k = kernels.entry(len).or_insert_with(|| dense_kernel(len, &dense));
            match window_covariance(k, &win.w) {
                Some(mut moment) => {
                    moment.ger(1.0, &win.mu, &win.mu, 1.0);
                    let entry = groups.entry(len).or_insert_with(|| (0, DMatrix::zeros(len, len)));
                    entry.0 += 1;
                    entry.1 += moment;
                }
                None => {
                    warn!("skipping hyperparameter window: kernel not positive definite after jitter");
                    skipped += 1;
                }
            }
        }
        let n_windows = groups.values().map(|g| g.0).sum();
        WindowObjective {
            groups: groups.into_values().collect(),
            n_windows,
            jitter: dense.jitter,
            skipped,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.n_windows == 0
    }

    fn spec_at(&self, theta: [f64; 2]) -> KernelSpec {
        KernelSpec {
            sigma2: theta[0].exp(),
            omega: theta[1].exp(),
            jitter: self.jitter,
        }
    }

    fn factor(len: usize, spec: &KernelSpec) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        dense_kernel(len, spec)
            .cholesky()
            .ok_or_else(|| Error::numerical("window kernel lost positive definiteness"))
    }

    /// Mean over windows of `F` at log-parameters `theta`.
    pub fn value(&self, theta: [f64; 2]) -> Result<f64> {
        let spec = self.spec_at(theta);
        let mut total = 0.0;
        for (count, moment) in &self.groups {
            let chol = Self::factor(moment.nrows(), &spec)?;
            let l = chol.l_dirty();
            let logdet: f64 = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
            let kinv = chol.inverse();
            total += -0.5 * (kinv.component_mul(moment).sum() + *count as f64 * logdet);
        }
        Ok(total / self.n_windows.max(1) as f64)
    }

    /// Mean over windows of `(∂F/∂log σ², ∂F/∂log ω)` at `theta`, using
    /// `∂F/∂K = ½ (K⁻¹ A K⁻¹ − m K⁻¹)`.
    pub fn gradient(&self, theta: [f64; 2]) -> Result<[f64; 2]> {
        let spec = self.spec_at(theta);
        let mut grad = [0.0; 2];
        for (count, moment) in &self.groups {
            let len = moment.nrows();
            let kinv = Self::factor(len, &spec)?.inverse();
            let dfdk = (&kinv * moment * &kinv - &kinv * *count as f64) * 0.5;
            let (d_sigma2, d_omega) = kernel_log_grads(len, &spec);
            grad[0] += dfdk.component_mul(&d_sigma2).sum();
            grad[1] += dfdk.component_mul(&d_omega).sum();
        }
        let m = self.n_windows.max(1) as f64;
        Ok([grad[0] / m, grad[1] / m])
    }
}

#[derive(Debug, Clone)]
pub struct HyperOutcome {
    pub spec: KernelSpec,
    pub objective_before: f64,
    pub objective_after: f64,
    pub iterations: usize,
    pub skipped_windows: usize,
}

fn clamp_theta(theta: [f64; 2]) -> [f64; 2] {
    [
        theta[0].clamp(SIGMA2_BOUNDS.0.ln(), SIGMA2_BOUNDS.1.ln()),
        theta[1].clamp(OMEGA_BOUNDS.0.ln(), OMEGA_BOUNDS.1.ln()),
    ]
}

/// Gradient ascent with backtracking on the windowed objective, starting at
/// `spec`. Returns `spec` unchanged when no window is usable.
pub fn update_hyper(windows: &[Window], spec: &KernelSpec, opts: &HyperOptions) -> Result<HyperOutcome> {
    spec.validate()?;
    if !(spec.omega > 0.0) {
        return Err(Error::validation("hyperparameter learning needs omega > 0"));
    }
    let objective = WindowObjective::new(windows, spec);
    if objective.is_empty() {
        return Ok(HyperOutcome {
            spec: *spec,
            objective_before: f64::NAN,
            objective_after: f64::NAN,
            iterations: 0,
            skipped_windows: objective.skipped,
        });
    }

    let mut theta = clamp_theta([spec.sigma2.ln(), spec.omega.ln()]);
    let mut value = objective.value(theta)?;
    let before = value;
    let mut step: f64 = 1.0;
    let mut iterations = 0;
    for _ in 0..opts.iters {
        let grad = objective.gradient(theta)?;
        let gnorm = (grad[0] * grad[0] + grad[1] * grad[1]).sqrt();
        if !gnorm.is_finite() {
            return Err(Error::numerical("non-finite hyperparameter gradient"));
        }
        if gnorm < 1e-10 {
            break;
        }
        step = step.min(opts.max_log_step / gnorm);
        let mut moved = false;
        for _ in 0..40 {
            let cand = clamp_theta([theta[0] + step * grad[0], theta[1] + step * grad[1]]);
            let cv = objective.value(cand);
            let actual = [cand[0] - theta[0], cand[1] - theta[1]];
            let predicted = actual[0] * grad[0] + actual[1] * grad[1];
            if let Ok(cv) = cv {
                if cv.is_finite() && cv >= value + 1e-4 * predicted && (actual[0] != 0.0 || actual[1] != 0.0) {
                    theta = cand;
                    value = cv;
                    moved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        iterations += 1;
        if !moved {
            break;
        }
        step *= 2.0;
    }

    Ok(HyperOutcome {
        spec: KernelSpec {
            sigma2: theta[0].exp(),
            omega: theta[1].exp(),
            jitter: spec.jitter,
        },
        objective_before: before,
        objective_after: value,
        iterations,
        skipped_windows: objective.skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stationary_when_posterior_equals_prior() {
        let spec = KernelSpec::new(1.3, 0.02).unwrap();
        let win = Window {
            mu: DVector::zeros(30),
            w: DVector::zeros(30),
        };
        let obj = WindowObjective::new(&[win], &spec);
        let d = spec.for_dense();
        let g = obj.gradient([d.sigma2.ln(), d.omega.ln()]).unwrap();
        assert!(g[0].abs() < 1e-8 && g[1].abs() < 1e-8, "{g:?}");
    }

    #[test]
    fn covariance_matches_direct_inverse() {
        let k = dense_kernel(15, &KernelSpec::new(1.0, 0.05).unwrap().with_jitter(1e-3));
        let w = DVector::from_fn(15, |i, _| if i % 3 == 0 { 0.0 } else { 0.1 * i as f64 });
        let sigma = window_covariance(&k, &w).unwrap();
        let direct = (k.clone().try_inverse().unwrap() + DMatrix::from_diagonal(&w))
            .try_inverse()
            .unwrap();
        assert!((sigma - &direct).abs().max() < 1e-8 * direct.abs().max());
    }

    #[test]
    fn log_omega_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let len = 40;
        let win = Window {
            mu: DVector::from_fn(len, |t, _| (t as f64 * 0.2).sin() + 0.1 * rng.random::<f64>()),
            w: DVector::from_fn(len, |_, _| rng.random::<f64>() * 2.0),
        };
        let spec = KernelSpec::new(0.8, 0.03).unwrap().with_jitter(1e-3);
        let obj = WindowObjective::new(&[win], &spec);
        let theta = [0.9f64.ln(), 0.02f64.ln()];
        let g = obj.gradient(theta).unwrap();
        let h = 1e-5;
        for j in 0..2 {
            let mut tp = theta;
            let mut tm = theta;
            tp[j] += h;
            tm[j] -= h;
            let fd = (obj.value(tp).unwrap() - obj.value(tm).unwrap()) / (2.0 * h);
            assert!((g[j] - fd).abs() <= 1e-4 * fd.abs().max(1e-8), "param {j}: {} vs {fd}", g[j]);
        }
    }

    #[test]
    fn ascent_does_not_decrease_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let windows: Vec<Window> = (0..5)
            .map(|_| Window {
                mu: DVector::from_fn(50, |t, _| (t as f64 * 0.3).cos() + 0.05 * rng.random::<f64>()),
                w: DVector::from_element(50, 5.0),
            })
            .collect();
        let spec = KernelSpec::new(1.0, 1e-3).unwrap();
        let out = update_hyper(&windows, &spec, &HyperOptions::default()).unwrap();
        assert!(out.objective_after >= out.objective_before);
        assert!(out.spec.omega > spec.omega);
    }
}
