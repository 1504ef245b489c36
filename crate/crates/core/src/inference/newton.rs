//! Conditional updates of the coordinate-ascent loop. Every Newton step is
//! wrapped in step halving on its own block of the bound, so an accepted
//! update never lowers the ELBO.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gp_prior::{CholFactor, LatentPrior};
use crate::model::{
    history_drive, included, rate_exponent, PosteriorFactor, SpikeData, Trial, TrialPosterior, ModelParams,
    DEFAULT_EXP_CAP,
};

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub step_halving_max: usize,
    pub exp_cap: f64,
    /// Keep each latent mean zero-centered within the trial by taking the
    /// Newton step on the centered affine subspace.
    pub center: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            step_halving_max: 10,
            exp_cap: DEFAULT_EXP_CAP,
            center: true,
        }
    }
}

/// Result of a damped Newton step on one block of variables.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub value: DVector<f64>,
    /// Fraction of the full Newton step that was taken (0 when rejected).
    pub step: f64,
    pub halvings: usize,
    /// Block objective before and after the step.
    pub before: f64,
    pub after: f64,
}

impl StepOutcome {
    pub fn accepted(&self) -> bool {
        self.step > 0.0
    }

    fn rejected(value: DVector<f64>, before: f64, halvings: usize) -> Self {
        StepOutcome {
            value,
            step: 0.0,
            halvings,
            before,
            after: before,
        }
    }
}

fn check_finite(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(format!("non-finite Newton update for {what}")))
    }
}

/// Backtracking along `direction` until the objective does not decrease.
fn halving_search<F>(
    start: &DVector<f64>,
    direction: &DVector<f64>,
    before: f64,
    max_halvings: usize,
    mut objective: F,
) -> StepOutcome
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let mut step = 1.0;
    for halvings in 0..=max_halvings {
        let candidate = start + direction * step;
        let after = objective(&candidate);
        if after.is_finite() && after >= before {
            return StepOutcome {
                value: candidate,
                step,
                halvings,
                before,
                after,
            };
        }
        step *= 0.5;
    }
    StepOutcome::rejected(start.clone(), before, max_halvings)
}

/// Projection of `x` onto `span(G) ∩ {zero mean}` (orthogonal).
pub fn project_centered(factor: &CholFactor, x: &DVector<f64>) -> DVector<f64> {
    let px = factor.project(x);
    let ones = DVector::from_element(x.len(), 1.0);
    let p1 = factor.project(&ones);
    let denom = p1.norm_squared();
    if denom <= f64::EPSILON * x.len() as f64 {
        return px;
    }
    let coef = p1.dot(&px) / denom;
    px - p1 * coef
}

fn mu_objective(
    trial: &Trial,
    alpha_l: &DVector<f64>,
    exponent: &DMatrix<f64>,
    mu_l: &DVector<f64>,
    candidate: &DVector<f64>,
    factor: &CholFactor,
    mask: Option<&[bool]>,
    cap: f64,
) -> f64 {
    let mut total = 0.0;
    for n in 0..trial.counts.ncols() {
        if !included(mask, n) {
            continue;
        }
        let a = alpha_l[n];
        for t in 0..trial.len() {
            let e = exponent[(t, n)] + a * (candidate[t] - mu_l[t]);
            total += trial.counts[(t, n)] * a * candidate[t] - e.min(cap).exp();
        }
    }
    total - 0.5 * factor.quad_form_inv(candidate)
}

/// Newton step for the mean of latent `l` in one trial.
///
/// The direction is `Σ ∇ = (I − G Gᵀ W + G B (I+B)⁻¹ Gᵀ W) u` with
/// `u = G Gᵀ Σ_n (y_n − λ_n) α_{n,l} − μ_l` and `W` built from the current
/// rates. With `center` set, the step is projected (in the `Σ` metric) onto
/// zero-mean vectors.
pub fn newton_mu(
    l: usize,
    trial: &Trial,
    params: &ModelParams,
    post: &TrialPosterior,
    factor: &CholFactor,
    opts: &NewtonOptions,
    mask: Option<&[bool]>,
) -> Result<StepOutcome> {
    let exponent = rate_exponent(trial, params, post);
    let alpha_l: DVector<f64> = params.alpha.column(l).into_owned();
    let mu_l: DVector<f64> = post.mu.column(l).into_owned();
    let len = trial.len();

    let mut grad_lik = DVector::zeros(len);
    let mut weights = DVector::zeros(len);
    for n in 0..trial.counts.ncols() {
        if !included(mask, n) {
            continue;
        }
        let a = alpha_l[n];
        if a == 0.0 {
            continue;
        }
        for t in 0..len {
            let lam = exponent[(t, n)].min(opts.exp_cap).exp();
            grad_lik[t] += (trial.counts[(t, n)] - lam) * a;
            weights[t] += lam * a * a;
        }
    }

    let g = factor.g();
    let u = g * g.tr_mul(&grad_lik) - &mu_l;
    let pf = PosteriorFactor::new(factor, weights)?;
    let mut delta = pf.newton_apply(&u);
    if opts.center {
        let sigma_one = pf.sigma_mul(&DVector::from_element(len, 1.0));
        let denom = sigma_one.sum();
        if denom > f64::EPSILON * len as f64 {
            let nu = (mu_l.sum() + delta.sum()) / denom;
            delta -= sigma_one * nu;
        }
    }
    check_finite(&delta, &format!("latent mean {l}"))?;

    let cap = opts.exp_cap;
    let objective = |c: &DVector<f64>| mu_objective(trial, &alpha_l, &exponent, &mu_l, c, factor, mask, cap);
    let before = objective(&mu_l);
    Ok(halving_search(&mu_l, &delta, before, opts.step_halving_max, objective))
}

/// Closed-form refresh of the precision contributions and marginal variances
/// of one trial: `W_{t,l} = Σ_n λ_{t,n} α_{n,l}²` and `V_{·,l} = diag(Σ_l)`.
pub fn update_w_and_v(
    trial: &Trial,
    params: &ModelParams,
    post: &TrialPosterior,
    priors: &[LatentPrior],
    mask: Option<&[bool]>,
    exp_cap: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let exponent = rate_exponent(trial, params, post);
    let len = trial.len();
    let dim = params.latent_dim();
    let mut w = DMatrix::zeros(len, dim);
    for n in 0..params.n_neurons() {
        if !included(mask, n) {
            continue;
        }
        for t in 0..len {
            let lam = exponent[(t, n)].min(exp_cap).exp();
            for l in 0..dim {
                let a = params.alpha[(n, l)];
                w[(t, l)] += lam * a * a;
            }
        }
    }
    let v = variances_from_w(&w, priors)?;
    Ok((w, v))
}

/// `diag(Σ_l)` for every latent from stored `W`.
pub fn variances_from_w(w: &DMatrix<f64>, priors: &[LatentPrior]) -> Result<DMatrix<f64>> {
    let len = w.nrows();
    let mut v = DMatrix::zeros(len, w.ncols());
    for (l, prior) in priors.iter().enumerate() {
        let pf = PosteriorFactor::new(prior.factor(len), w.column(l).into_owned())?;
        v.set_column(l, &pf.variance());
    }
    Ok(v)
}

struct NeuronBlock {
    counts: DVector<f64>,
    mu: DMatrix<f64>,
    v: DMatrix<f64>,
    drive: DVector<f64>,
}

fn neuron_blocks(n: usize, data: &SpikeData, posterior: &[TrialPosterior], beta_n: &[f64]) -> Vec<NeuronBlock> {
    data.trials()
        .iter()
        .zip(posterior)
        .map(|(trial, post)| NeuronBlock {
            counts: trial.counts.column(n).into_owned(),
            mu: post.mu.clone(),
            v: post.v.clone(),
            drive: history_drive(trial, n, beta_n),
        })
        .collect()
}

fn alpha_objective(blocks: &[NeuronBlock], alpha: &DVector<f64>, cap: f64) -> f64 {
    let half_sq = alpha.map(|a| 0.5 * a * a);
    let mut total = 0.0;
    for b in blocks {
        let lin = &b.mu * alpha;
        let var = &b.v * &half_sq;
        for t in 0..b.counts.len() {
            let e = b.drive[t] + lin[t] + var[t];
            total += b.counts[t] * lin[t] - e.min(cap).exp();
        }
    }
    total
}

/// Newton step for the loading of neuron `n`, with the posterior held fixed.
///
/// Gradient `μᵀ(y − λ) − diag(Vᵀλ) α`, Hessian
/// `−(μ + V∘1αᵀ)ᵀ diag(λ) (μ + V∘1αᵀ) − diag(Vᵀλ)`.
pub fn newton_alpha(
    n: usize,
    data: &SpikeData,
    posterior: &[TrialPosterior],
    params: &ModelParams,
    opts: &NewtonOptions,
) -> Result<StepOutcome> {
    let dim = params.latent_dim();
    let alpha: DVector<f64> = params.alpha.row(n).transpose();
    let beta_n: Vec<f64> = params.beta.row(n).iter().copied().collect();
    let blocks = neuron_blocks(n, data, posterior, &beta_n);

    let mut grad = DVector::zeros(dim);
    let mut neg_hess = DMatrix::zeros(dim, dim);
    let half_sq = alpha.map(|a| 0.5 * a * a);
    for b in &blocks {
        let lin = &b.mu * &alpha;
        let var = &b.v * &half_sq;
        for t in 0..b.counts.len() {
            let lam = (b.drive[t] + lin[t] + var[t]).min(opts.exp_cap).exp();
            let resid = b.counts[t] - lam;
            let mut z = DVector::zeros(dim);
            for l in 0..dim {
                let m = b.mu[(t, l)];
                let v = b.v[(t, l)];
                z[l] = m + v * alpha[l];
                grad[l] += m * resid - lam * v * alpha[l];
                neg_hess[(l, l)] += lam * v;
            }
            neg_hess.ger(lam, &z, &z, 1.0);
        }
    }
    let before = alpha_objective(&blocks, &alpha, opts.exp_cap);
    let Some(chol) = neg_hess.clone().cholesky() else {
        return Ok(StepOutcome::rejected(alpha, before, 0));
    };
    let delta = chol.solve(&grad);
    check_finite(&delta, &format!("loading of neuron {n}"))?;
    let cap = opts.exp_cap;
    Ok(halving_search(&alpha, &delta, before, opts.step_halving_max, |a| {
        alpha_objective(&blocks, a, cap)
    }))
}

struct BetaBlock<'a> {
    counts: DVector<f64>,
    design: &'a DMatrix<f64>,
    /// `α·μ_t + ½ Σ α² V_t`
    offset: DVector<f64>,
}

fn beta_objective(blocks: &[BetaBlock<'_>], beta: &DVector<f64>, cap: f64) -> f64 {
    let mut total = 0.0;
    for b in blocks {
        let drive = b.design * beta;
        for t in 0..b.counts.len() {
            let e = drive[t] + b.offset[t];
            total += b.counts[t] * drive[t] - e.min(cap).exp();
        }
    }
    total
}

/// Newton step for the bias and history weights of neuron `n`.
///
/// Gradient `hᵀ(y − λ)`, Hessian `−hᵀ diag(λ) h`. When the Hessian is
/// singular (a history column is all zeros, e.g. for a silent neuron) only
/// the bias is updated.
pub fn newton_beta(
    n: usize,
    data: &SpikeData,
    posterior: &[TrialPosterior],
    params: &ModelParams,
    opts: &NewtonOptions,
) -> Result<StepOutcome> {
    let width = params.beta.ncols();
    let beta: DVector<f64> = params.beta.row(n).transpose();
    let alpha: DVector<f64> = params.alpha.row(n).transpose();
    let half_sq = alpha.map(|a| 0.5 * a * a);
    let blocks: Vec<BetaBlock<'_>> = data
        .trials()
        .iter()
        .zip(posterior)
        .map(|(trial, post)| BetaBlock {
            counts: trial.counts.column(n).into_owned(),
            design: trial.history.neuron(n),
            offset: &post.mu * &alpha + &post.v * &half_sq,
        })
        .collect();

    let mut grad = DVector::zeros(width);
    let mut neg_hess = DMatrix::zeros(width, width);
    for b in &blocks {
        let drive = b.design * &beta;
        let lam = DVector::from_fn(b.counts.len(), |t, _| (drive[t] + b.offset[t]).min(opts.exp_cap).exp());
        grad += b.design.tr_mul(&(&b.counts - &lam));
        let mut weighted = b.design.clone();
        for (t, mut row) in weighted.row_iter_mut().enumerate() {
            row *= lam[t];
        }
        neg_hess += b.design.tr_mul(&weighted);
    }

    let delta = match neg_hess.clone().cholesky() {
        Some(chol) => chol.solve(&grad),
        None => {
            let mut d = DVector::zeros(width);
            if neg_hess[(0, 0)] > 0.0 {
                d[0] = grad[0] / neg_hess[(0, 0)];
            }
            d
        }
    };
    check_finite(&delta, &format!("history weights of neuron {n}"))?;
    let cap = opts.exp_cap;
    let before = beta_objective(&blocks, &beta, cap);
    Ok(halving_search(&beta, &delta, before, opts.step_halving_max, |b| {
        beta_objective(&blocks, b, cap)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp_prior::KernelSpec;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn prior(len: usize) -> LatentPrior {
        LatentPrior::new(KernelSpec::new(1.0, 0.05).unwrap(), 1e-12, len, &[len]).unwrap()
    }

    fn posterior(mu: DMatrix<f64>) -> TrialPosterior {
        let shape = mu.shape();
        TrialPosterior {
            mu,
            w: DMatrix::zeros(shape.0, shape.1),
            v: DMatrix::zeros(shape.0, shape.1),
        }
    }

    fn raw() -> NewtonOptions {
        NewtonOptions {
            center: false,
            ..NewtonOptions::default()
        }
    }

    #[test]
    fn unloaded_latent_returns_to_prior_mean() {
        let len = 12;
        let p = prior(len);
        let counts = DMatrix::from_fn(len, 2, |t, n| ((t + n) % 3) as f64);
        let data = SpikeData::new(vec![counts], 0.001, 0).unwrap();
        let params = ModelParams::new(DMatrix::zeros(2, 1), DMatrix::zeros(2, 1)).unwrap();
        let mu = p.factor(len).g() * DVector::from_fn(p.factor(len).rank(), |i, _| (i as f64 * 0.7).sin());
        let post = posterior(DMatrix::from_column_slice(len, 1, mu.as_slice()));
        let out = newton_mu(0, data.trial(0), &params, &post, p.factor(len), &raw(), None).unwrap();
        assert_eq!(out.step, 1.0);
        assert!(out.value.amax() <= 1e-8 * mu.amax(), "{}", out.value.amax());
    }

    #[test]
    fn w_and_v_without_loadings() {
        let len = 10;
        let p = prior(len);
        let data = SpikeData::new(vec![DMatrix::from_element(len, 3, 1.0)], 0.001, 0).unwrap();
        let params = ModelParams::new(DMatrix::zeros(3, 1), DMatrix::from_element(3, 1, 0.3)).unwrap();
        let post = posterior(DMatrix::zeros(len, 1));
        let (w, v) = update_w_and_v(data.trial(0), &params, &post, &[p], None, DEFAULT_EXP_CAP).unwrap();
        assert_eq!(w, DMatrix::zeros(len, 1));
        for x in v.iter() {
            assert_relative_eq!(*x, 1.0, max_relative = 1e-10);
        }
    }

    #[test]
    fn w_of_a_single_neuron() {
        let p = LatentPrior::new(KernelSpec::new(1.0, 0.05).unwrap(), 1e-12, 1, &[1]).unwrap();
        let data = SpikeData::new(vec![dmatrix![2.0]], 0.001, 0).unwrap();
        let params = ModelParams::new(dmatrix![0.8], dmatrix![-0.5]).unwrap();
        let post = TrialPosterior {
            mu: dmatrix![0.3],
            w: dmatrix![0.0],
            v: dmatrix![0.1],
        };
        let (w, _) = update_w_and_v(data.trial(0), &params, &post, &[p], None, DEFAULT_EXP_CAP).unwrap();
        let lam = (-0.5f64 + 0.8 * 0.3 + 0.5 * 0.64 * 0.1).exp();
        assert_relative_eq!(w[(0, 0)], lam * 0.64, max_relative = 1e-14);
    }

    #[test]
    fn alpha_is_stationary_when_rates_match_counts() {
        let data = SpikeData::new(vec![DMatrix::from_element(8, 1, 1.0)], 0.001, 0).unwrap();
        let params = ModelParams::new(dmatrix![0.0], dmatrix![0.0]).unwrap();
        let mu = DMatrix::from_fn(8, 1, |t, _| t as f64 - 3.5);
        let post = [posterior(mu)];
        let out = newton_alpha(0, &data, &post, &params, &raw()).unwrap();
        assert_eq!(out.value, dvector_of(&[0.0]));
    }

    fn dvector_of(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn alpha_step_is_a_glm_step_without_variance() {
        let len = 30;
        let mu = DMatrix::from_fn(len, 1, |t, _| ((t as f64) * 0.4).sin());
        let counts = DMatrix::from_fn(len, 1, |t, _| [0.0, 1.0, 2.0, 1.0, 0.0][t % 5]);
        let data = SpikeData::new(vec![counts.clone()], 0.001, 0).unwrap();
        let params = ModelParams::new(dmatrix![0.2], dmatrix![0.1]).unwrap();
        let post = [posterior(mu.clone())];
        let out = newton_alpha(0, &data, &post, &params, &raw()).unwrap();

        // textbook Poisson GLM Newton step on the design μ with offset β
        let (mut grad, mut hess) = (0.0, 0.0);
        for t in 0..len {
            let lam = (0.1 + 0.2 * mu[(t, 0)]).exp();
            grad += mu[(t, 0)] * (counts[(t, 0)] - lam);
            hess += mu[(t, 0)] * mu[(t, 0)] * lam;
        }
        assert_eq!(out.step, 1.0);
        assert_relative_eq!(out.value[0], 0.2 + grad / hess, max_relative = 1e-12);
    }

    #[test]
    fn beta_converges_to_log_mean_rate() {
        let counts = DMatrix::from_fn(40, 1, |t, _| [0.0, 1.0, 0.0, 3.0][t % 4]);
        let data = SpikeData::new(vec![counts], 0.001, 0).unwrap();
        let mut params = ModelParams::new(dmatrix![0.0], dmatrix![-2.0]).unwrap();
        let post = [posterior(DMatrix::zeros(40, 1))];
        for _ in 0..30 {
            let out = newton_beta(0, &data, &post, &params, &raw()).unwrap();
            params.beta[(0, 0)] = out.value[0];
        }
        assert_relative_eq!(params.beta[(0, 0)], 1.0f64.ln(), epsilon = 1e-10);
    }

    #[test]
    fn silent_neuron_updates_bias_only() {
        let counts = DMatrix::from_fn(20, 2, |t, n| if n == 0 { 0.0 } else { (t % 2) as f64 });
        let data = SpikeData::new(vec![counts], 0.001, 1).unwrap();
        let params = ModelParams::new(DMatrix::zeros(2, 1), dmatrix![-1.0, 0.5; 0.0, 0.0]).unwrap();
        let post = [posterior(DMatrix::zeros(20, 1))];
        let out = newton_beta(0, &data, &post, &params, &raw()).unwrap();
        assert!(out.accepted());
        assert!(out.value[0] < -1.0);
        assert_eq!(out.value[1], 0.5);
    }

    #[test]
    fn projection_is_centered_and_idempotent() {
        let p = prior(15);
        let x = DVector::from_fn(15, |t, _| (t as f64 * 0.3).cos() + 2.0);
        let once = project_centered(p.factor(15), &x);
        assert!(once.sum().abs() <= 1e-12 * x.norm());
        let twice = project_centered(p.factor(15), &once);
        assert_relative_eq!(once, twice, epsilon = 1e-12);
    }
}
