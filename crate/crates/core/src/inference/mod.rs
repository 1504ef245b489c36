//! Coordinate-ascent variational inference.

mod constrain;
mod hyper;
mod newton;

use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use constrain::{center_latents, constrain, loading_scales, ConstraintFlags};
pub use hyper::{
    draw_windows, update_hyper, window_covariance, HyperOptions, HyperOutcome, Window, WindowObjective,
    OMEGA_BOUNDS, SIGMA2_BOUNDS,
};
pub use newton::{
    newton_alpha, newton_beta, newton_mu, project_centered, update_w_and_v, variances_from_w, NewtonOptions,
    StepOutcome,
};

use crate::error::{Error, Result};
use crate::gp_prior::{KernelSpec, LatentPrior, DEFAULT_MAX_RANK, DEFAULT_RELATIVE_TOL};
use crate::init::{initialize, InitOptions};
use crate::model::{
    elbo_terms, rate_exponent, rates_from_exponent, trial_elbo, LatentPosterior, ModelParams, SpikeData, Trial,
    TrialPosterior, DEFAULT_EXP_CAP,
};

fn default_latent_dim() -> usize {
    2
}
fn default_history_order() -> usize {
    10
}
fn default_tol() -> f64 {
    1e-4
}
fn default_max_iter() -> usize {
    50
}
fn default_hyper_every() -> usize {
    5
}
fn default_true() -> bool {
    true
}
fn default_subsample_len() -> usize {
    100
}
fn default_n_subsamples() -> usize {
    20
}
fn default_hyper_iters() -> usize {
    20
}
fn default_step_halving_max() -> usize {
    10
}
fn default_kernel() -> KernelSpec {
    KernelSpec {
        sigma2: 1.0,
        omega: 1e-2,
        jitter: 0.0,
    }
}
fn default_max_rank() -> usize {
    DEFAULT_MAX_RANK
}
fn default_tol_per_bin() -> f64 {
    DEFAULT_RELATIVE_TOL
}
fn default_exp_cap() -> f64 {
    DEFAULT_EXP_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_latent_dim", alias = "L")]
    pub latent_dim: usize,
    #[serde(default = "default_history_order", alias = "p")]
    pub history_order: usize,
    /// Convergence threshold on the max-norm change of `(μ, α, β)`.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_true")]
    pub learn_hyper: bool,
    #[serde(default = "default_hyper_every")]
    pub hyper_every: usize,
    #[serde(default = "default_subsample_len")]
    pub subsample_len: usize,
    #[serde(default = "default_n_subsamples")]
    pub n_subsamples: usize,
    #[serde(default = "default_hyper_iters")]
    pub hyper_iters: usize,
    #[serde(default = "default_step_halving_max")]
    pub step_halving_max: usize,
    #[serde(default)]
    pub seed: u64,
    /// Initial kernel, shared by every latent at the start.
    #[serde(default = "default_kernel")]
    pub kernel: KernelSpec,
    #[serde(default = "default_max_rank")]
    pub max_rank: usize,
    /// Truncation tolerance per bin, relative to `sigma2`.
    #[serde(default = "default_tol_per_bin")]
    pub tol_per_bin: f64,
    #[serde(default = "default_exp_cap")]
    pub exp_cap: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::validation(format!("config field `{field}`: {msg}")));
        if self.latent_dim < 1 {
            return bad("latent_dim", "must be at least 1");
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return bad("tol", "must be positive");
        }
        if self.hyper_every < 1 {
            return bad("hyper_every", "must be at least 1");
        }
        if self.subsample_len < 2 {
            return bad("subsample_len", "must be at least 2");
        }
        if self.n_subsamples < 1 {
            return bad("n_subsamples", "must be at least 1");
        }
        if self.max_rank < 1 {
            return bad("max_rank", "must be at least 1");
        }
        if !(self.tol_per_bin.is_finite() && self.tol_per_bin > 0.0) {
            return bad("tol_per_bin", "must be positive");
        }
        if !(self.exp_cap.is_finite() && self.exp_cap > 0.0) {
            return bad("exp_cap", "must be positive");
        }
        self.kernel
            .validate()
            .map_err(|e| Error::validation(format!("config field `kernel`: {e}")))?;
        if self.learn_hyper && !(self.kernel.omega > 0.0) {
            return bad("kernel.omega", "must be positive when learning hyperparameters");
        }
        Ok(())
    }

    pub fn newton_options(&self) -> NewtonOptions {
        NewtonOptions {
            step_halving_max: self.step_halving_max,
            exp_cap: self.exp_cap,
            center: true,
        }
    }

    pub fn hyper_options(&self) -> HyperOptions {
        HyperOptions {
            subsample_len: self.subsample_len,
            n_subsamples: self.n_subsamples,
            iters: self.hyper_iters,
            ..HyperOptions::default()
        }
    }

    /// One prior per latent from the initial kernel.
    pub fn initial_priors(&self, lengths: &[usize]) -> Result<Vec<LatentPrior>> {
        (0..self.latent_dim)
            .map(|_| LatentPrior::new(self.kernel, self.tol_per_bin, self.max_rank, lengths))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperRecord {
    pub iteration: usize,
    pub latent: usize,
    pub sigma2: f64,
    pub omega: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// ELBO after initialization followed by one value per outer iteration.
    pub elbo_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub hyper_trace: Vec<HyperRecord>,
    /// Rate evaluations that hit the exponent cap, summed over iteration ends.
    pub clamp_count: usize,
    /// Seconds spent in each outer iteration.
    pub wall_time: Vec<f64>,
    /// Max-norm change of `(μ, α, β)` per outer iteration.
    pub max_change: Vec<f64>,
    /// Latent columns whose loadings vanished during a constraint step.
    pub zero_columns: Vec<usize>,
    pub init_fa_converged: bool,
    /// Neurons whose initial history regression needed the ridge fallback.
    pub init_ridge_neurons: Vec<usize>,
    /// Newton sweeps over the bias and history weights before the first
    /// iteration.
    pub init_beta_sweeps: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub posterior: LatentPosterior,
    pub priors: Vec<LatentPrior>,
    pub report: FitReport,
}

/// What an observer sees at the end of each outer iteration.
pub struct IterationView<'a> {
    pub iteration: usize,
    pub elbo: f64,
    /// Seconds since the start of the loop, initialization excluded.
    pub elapsed: f64,
    pub params: &'a ModelParams,
    pub posterior: &'a LatentPosterior,
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Updates every latent mean of one trial in turn.
fn update_trial_means(
    trial: &Trial,
    params: &ModelParams,
    post: &mut TrialPosterior,
    priors: &[LatentPrior],
    opts: &NewtonOptions,
    mask: Option<&[bool]>,
) -> Result<()> {
    let len = trial.len();
    for (l, prior) in priors.iter().enumerate() {
        let out = newton_mu(l, trial, params, post, prior.factor(len), opts, mask)?;
        if out.accepted() {
            post.mu.set_column(l, &out.value);
        }
    }
    Ok(())
}

/// Moves `W` toward its closed-form value `λα²` for one trial, accepting the
/// full refresh when it does not lower the bound and otherwise taking the
/// largest halved step that does.
fn refresh_trial_w(
    trial: &Trial,
    params: &ModelParams,
    post: &mut TrialPosterior,
    priors: &[LatentPrior],
    opts: &NewtonOptions,
    mask: Option<&[bool]>,
) -> Result<()> {
    let before = trial_elbo(trial, params, post, priors, mask, opts.exp_cap)?.value();
    let (target, v_target) = update_w_and_v(trial, params, post, priors, mask, opts.exp_cap)?;
    let mut cand = TrialPosterior {
        mu: post.mu.clone(),
        w: target.clone(),
        v: v_target,
    };
    let mut eta = 1.0;
    for _ in 0..=opts.step_halving_max {
        let after = trial_elbo(trial, params, &cand, priors, mask, opts.exp_cap)?.value();
        if after.is_finite() && after >= before {
            *post = cand;
            return Ok(());
        }
        eta *= 0.5;
        cand.w = &post.w + (&target - &post.w) * eta;
        cand.v = variances_from_w(&cand.w, priors)?;
    }
    Ok(())
}

/// One E-step sweep over all trials: means, then precision weights.
fn posterior_sweep(
    data: &SpikeData,
    params: &ModelParams,
    posterior: &mut LatentPosterior,
    priors: &[LatentPrior],
    opts: &NewtonOptions,
    mask: Option<&[bool]>,
) -> Result<()> {
    data.trials()
        .par_iter()
        .zip(posterior.trials.par_iter_mut())
        .enumerate()
        .map(|(k, (trial, post))| {
            update_trial_means(trial, params, post, priors, opts, mask)?;
            refresh_trial_w(trial, params, post, priors, opts, mask)
                .map_err(|e| e.context(&format!("trial {k}")))
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(())
}

fn weight_sweep(data: &SpikeData, params: &mut ModelParams, posterior: &LatentPosterior, opts: &NewtonOptions) -> Result<()> {
    let n_neurons = params.n_neurons();
    let snapshot = params.clone();
    let alphas = (0..n_neurons)
        .into_par_iter()
        .map(|n| newton_alpha(n, data, &posterior.trials, &snapshot, opts))
        .collect::<Result<Vec<_>>>()?;
    for (n, out) in alphas.into_iter().enumerate() {
        if out.accepted() {
            params.alpha.set_row(n, &out.value.transpose());
        }
    }
    let snapshot = params.clone();
    let betas = (0..n_neurons)
        .into_par_iter()
        .map(|n| newton_beta(n, data, &posterior.trials, &snapshot, opts))
        .collect::<Result<Vec<_>>>()?;
    for (n, out) in betas.into_iter().enumerate() {
        if out.accepted() {
            params.beta.set_row(n, &out.value.transpose());
        }
    }
    Ok(())
}

/// Cap on the β-only Newton sweeps run before the first iteration.
const BETA_WARMUP_SWEEPS: usize = 100;

/// Newton sweeps over `β` alone until its max-norm change drops below `tol`.
/// The least-squares start regresses counts rather than log rates and can be
/// far off for high-rate neurons; this brings it to the right scale before
/// the latents are touched. Returns the number of sweeps.
fn settle_beta(
    data: &SpikeData,
    params: &mut ModelParams,
    posterior: &[TrialPosterior],
    opts: &NewtonOptions,
    max_sweeps: usize,
    tol: f64,
) -> Result<usize> {
    for sweep in 1..=max_sweeps {
        let snapshot = params.clone();
        let betas = (0..params.n_neurons())
            .into_par_iter()
            .map(|n| newton_beta(n, data, posterior, &snapshot, opts))
            .collect::<Result<Vec<_>>>()?;
        let mut change = 0.0f64;
        for (n, out) in betas.into_iter().enumerate() {
            if out.accepted() {
                let old: DVector<f64> = params.beta.row(n).transpose();
                change = change.max((&out.value - old).amax());
                params.beta.set_row(n, &out.value.transpose());
            }
        }
        if change < tol {
            return Ok(sweep);
        }
    }
    Ok(max_sweeps)
}

fn clamp_count(data: &SpikeData, params: &ModelParams, posterior: &LatentPosterior, cap: f64) -> usize {
    data.trials()
        .iter()
        .zip(&posterior.trials)
        .map(|(trial, post)| rates_from_exponent(&rate_exponent(trial, params, post), cap).1)
        .sum()
}

/// Re-expresses the posterior under new priors: means are projected onto the
/// centered span of the new factors and variances recomputed from stored `W`.
fn reproject_posterior(posterior: &mut LatentPosterior, priors: &[LatentPrior]) -> Result<()> {
    for post in &mut posterior.trials {
        let len = post.len();
        for (l, prior) in priors.iter().enumerate() {
            let mu = project_centered(prior.factor(len), &post.mu.column(l).into_owned());
            post.mu.set_column(l, &mu);
        }
        post.v = variances_from_w(&post.w, priors)?;
    }
    Ok(())
}

fn hyper_step(
    data: &SpikeData,
    params: &ModelParams,
    posterior: &mut LatentPosterior,
    priors: &mut [LatentPrior],
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
    iteration: usize,
    trace: &mut Vec<HyperRecord>,
) -> Result<()> {
    let lengths = data.trial_lengths();
    let opts = config.hyper_options();
    for l in 0..priors.len() {
        let windows = draw_windows(&posterior.trials, l, &opts, rng);
        let current = *priors[l].spec();
        let outcome = update_hyper(&windows, &current, &opts)?;
        if outcome.skipped_windows > 0 {
            warn!("latent {l}: skipped {} hyperparameter windows", outcome.skipped_windows);
        }
        let before = elbo_terms(data, params, posterior, priors, None)?.value();
        let target = [outcome.spec.sigma2.ln(), outcome.spec.omega.ln()];
        let start = [current.sigma2.ln(), current.omega.ln()];
        let mut accepted = false;
        let mut frac = 1.0;
        for _ in 0..6 {
            let spec = KernelSpec {
                sigma2: (start[0] + frac * (target[0] - start[0])).exp(),
                omega: (start[1] + frac * (target[1] - start[1])).exp(),
                jitter: current.jitter,
            };
            if spec == current {
                break;
            }
            let mut cand_prior = priors[l].clone();
            cand_prior.rebuild(spec, &lengths)?;
            let old_prior = std::mem::replace(&mut priors[l], cand_prior);
            let mut cand_post = posterior.clone();
            reproject_posterior(&mut cand_post, priors)?;
            let after = elbo_terms(data, params, &cand_post, priors, None)?.value();
            if after.is_finite() && after >= before {
                *posterior = cand_post;
                accepted = true;
                break;
            }
            priors[l] = old_prior;
            frac *= 0.5;
        }
        let spec = priors[l].spec();
        debug!(
            "iteration {iteration}, latent {l}: sigma2 {:.4e}, omega {:.4e}, accepted {accepted}",
            spec.sigma2, spec.omega
        );
        trace.push(HyperRecord {
            iteration,
            latent: l,
            sigma2: spec.sigma2,
            omega: spec.omega,
            accepted,
        });
    }
    Ok(())
}

/// Fit from the factor-analysis initialization.
pub fn fit(data: &SpikeData, config: &FitConfig) -> Result<FitResult> {
    fit_with_observer(data, config, |_| {})
}

/// Fit, calling `observer` after every outer iteration.
pub fn fit_with_observer<F>(data: &SpikeData, config: &FitConfig, observer: F) -> Result<FitResult>
where
    F: FnMut(&IterationView<'_>),
{
    config.validate()?;
    if config.history_order != data.history_order() {
        return Err(Error::validation(format!(
            "config history order {} does not match the data ({})",
            config.history_order,
            data.history_order()
        )));
    }
    let init = initialize(data, config.latent_dim, &InitOptions::default())?;
    let report = FitReport {
        init_fa_converged: init.fa_converged,
        init_ridge_neurons: init.ridge_neurons.clone(),
        ..FitReport::default()
    };
    let lengths = data.trial_lengths();
    let priors = config.initial_priors(&lengths)?;
    let mut posterior = LatentPosterior::from_prior(&lengths, &priors);
    for (post, mu) in posterior.trials.iter_mut().zip(&init.latent_means) {
        let len = post.len();
        for (l, prior) in priors.iter().enumerate() {
            let m = project_centered(prior.factor(len), &mu.column(l).into_owned());
            post.mu.set_column(l, &m);
        }
    }
    run_fit(data, config, init.params, posterior, priors, report, observer)
}

/// Fit starting from the given parameters and posterior means. `posterior`
/// means are projected onto the prior factors first; `W` is refreshed
/// before the first iteration.
pub fn fit_from(
    data: &SpikeData,
    config: &FitConfig,
    params: ModelParams,
    posterior: LatentPosterior,
    priors: Vec<LatentPrior>,
) -> Result<FitResult> {
    config.validate()?;
    params.check_against(data)?;
    let mut posterior = posterior;
    reproject_posterior(&mut posterior, &priors)?;
    run_fit(data, config, params, posterior, priors, FitReport::default(), |_| {})
}

fn run_fit<F>(
    data: &SpikeData,
    config: &FitConfig,
    mut params: ModelParams,
    mut posterior: LatentPosterior,
    mut priors: Vec<LatentPrior>,
    mut report: FitReport,
    mut observer: F,
) -> Result<FitResult>
where
    F: FnMut(&IterationView<'_>),
{
    params.check_against(data)?;
    if params.latent_dim() != priors.len() {
        return Err(Error::validation("one prior per latent dimension is required"));
    }
    let opts = config.newton_options();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    report.init_beta_sweeps = settle_beta(data, &mut params, &posterior.trials, &opts, BETA_WARMUP_SWEEPS, config.tol)?;
    for (trial, post) in data.trials().iter().zip(posterior.trials.iter_mut()) {
        refresh_trial_w(trial, &params, post, &priors, &opts, None)?;
    }
    let initial = elbo_terms(data, &params, &posterior, &priors, None)?.value();
    if !initial.is_finite() {
        return Err(Error::numerical("ELBO is not finite after initialization"));
    }
    report.elbo_trace.push(initial);
    info!("initial ELBO {initial:.6e}");

    let start = Instant::now();
    for iteration in 1..=config.max_iter {
        let tick = Instant::now();
        let prev_params = params.clone();
        let prev_mu: Vec<DMatrix<f64>> = posterior.trials.iter().map(|p| p.mu.clone()).collect();

        let with_ctx = |e: Error| e.context(&format!("iteration {iteration}"));
        data.trials()
            .par_iter()
            .zip(posterior.trials.par_iter_mut())
            .map(|(trial, post)| update_trial_means(trial, &params, post, &priors, &opts, None))
            .collect::<Result<Vec<()>>>()
            .map_err(with_ctx)?;
        weight_sweep(data, &mut params, &posterior, &opts).map_err(with_ctx)?;
        let flags = constrain(&mut params, &mut posterior, &mut priors);
        for l in flags.zero_columns {
            if !report.zero_columns.contains(&l) {
                warn!("loading column {l} is identically zero");
                report.zero_columns.push(l);
            }
        }
        data.trials()
            .par_iter()
            .zip(posterior.trials.par_iter_mut())
            .map(|(trial, post)| refresh_trial_w(trial, &params, post, &priors, &opts, None))
            .collect::<Result<Vec<()>>>()
            .map_err(with_ctx)?;
        if config.learn_hyper && iteration % config.hyper_every == 0 {
            hyper_step(
                data,
                &params,
                &mut posterior,
                &mut priors,
                config,
                &mut rng,
                iteration,
                &mut report.hyper_trace,
            )
            .map_err(with_ctx)?;
        }

        let value = elbo_terms(data, &params, &posterior, &priors, None)?.value();
        if !value.is_finite() {
            return Err(Error::numerical(format!("ELBO is not finite at iteration {iteration}")));
        }
        let mut change = max_abs_diff(&params.alpha, &prev_params.alpha).max(max_abs_diff(&params.beta, &prev_params.beta));
        for (post, prev) in posterior.trials.iter().zip(&prev_mu) {
            change = change.max(max_abs_diff(&post.mu, prev));
        }
        report.elbo_trace.push(value);
        report.max_change.push(change);
        report.wall_time.push(tick.elapsed().as_secs_f64());
        report.iterations = iteration;
        debug!("iteration {iteration}: ELBO {value:.8e}, change {change:.3e}");
        observer(&IterationView {
            iteration,
            elbo: value,
            elapsed: start.elapsed().as_secs_f64(),
            params: &params,
            posterior: &posterior,
        });
        if change < config.tol {
            report.converged = true;
            break;
        }
    }
    report.clamp_count = clamp_count(data, &params, &posterior, config.exp_cap);
    info!(
        "fit finished after {} iterations (converged: {}), ELBO {:.6e}",
        report.iterations,
        report.converged,
        report.elbo_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(FitResult {
        params,
        posterior,
        priors,
        report,
    })
}

/// Posterior over latents for `data` with parameters and priors frozen.
///
/// Only neurons with `mask[n] == true` contribute to the likelihood. The
/// posterior starts at the prior mean, so an excluded neuron has no influence
/// on the result.
pub fn infer_posterior(
    data: &SpikeData,
    params: &ModelParams,
    priors: &[LatentPrior],
    config: &FitConfig,
    mask: Option<&[bool]>,
) -> Result<LatentPosterior> {
    params.check_against(data)?;
    if let Some(m) = mask {
        if m.len() != data.n_neurons() {
            return Err(Error::validation(format!(
                "neuron mask has {} entries, data has {} neurons",
                m.len(),
                data.n_neurons()
            )));
        }
    }
    let lengths = data.trial_lengths();
    let mut local = priors.to_vec();
    for prior in &mut local {
        let spec = *prior.spec();
        if lengths.iter().any(|len| !prior.lengths().any(|have| have == *len)) {
            let mut all: Vec<usize> = prior.lengths().collect();
            all.extend(&lengths);
            prior.rebuild(spec, &all)?;
        }
    }
    let opts = config.newton_options();
    let mut posterior = LatentPosterior::from_prior(&lengths, &local);
    for _ in 0..config.max_iter.max(1) {
        let prev: Vec<DMatrix<f64>> = posterior.trials.iter().map(|p| p.mu.clone()).collect();
        posterior_sweep(data, params, &mut posterior, &local, &opts, mask)?;
        let change = posterior
            .trials
            .iter()
            .zip(&prev)
            .fold(0.0f64, |m, (p, q)| m.max(max_abs_diff(&p.mu, q)));
        if change < config.tol {
            break;
        }
    }
    Ok(posterior)
}

/// Poisson GLM with bias and history only (all loadings zero), fitted by
/// Newton's method. Used as a latent-free control.
pub fn fit_history_only(data: &SpikeData, latent_dim: usize, config: &FitConfig) -> Result<ModelParams> {
    let init = crate::init::init_history_weights(data)?;
    let mut params = ModelParams::new(DMatrix::zeros(data.n_neurons(), latent_dim), init.beta)?;
    let posterior: Vec<TrialPosterior> = data
        .trials()
        .iter()
        .map(|t| TrialPosterior {
            mu: DMatrix::zeros(t.len(), latent_dim),
            w: DMatrix::zeros(t.len(), latent_dim),
            v: DMatrix::zeros(t.len(), latent_dim),
        })
        .collect();
    let opts = config.newton_options();
    for _ in 0..config.max_iter.max(1) {
        let mut change = 0.0f64;
        for n in 0..data.n_neurons() {
            let out = newton_beta(n, data, &posterior, &params, &opts)?;
            if out.accepted() {
                let old: DVector<f64> = params.beta.row(n).transpose();
                change = change.max((&out.value - old).amax());
                params.beta.set_row(n, &out.value.transpose());
            }
        }
        if change < config.tol {
            break;
        }
    }
    Ok(params)
}
