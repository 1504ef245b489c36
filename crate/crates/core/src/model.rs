//! The generative model: spike-history design, conditional intensity,
//! expected rates under the factorized Gaussian posterior, the point-process
//! log-likelihood and the evidence lower bound.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::gp_prior::{CholFactor, LatentPrior};

/// Exponents above this value are clamped before `exp`.
pub const DEFAULT_EXP_CAP: f64 = 30.0;

/// Per-neuron spike-history design of one trial.
///
/// Row `t` of neuron `n`'s matrix is `[1, y[t-p], …, y[t-1]]` (oldest lag
/// first); lags reaching before the start of the trial are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryDesign {
    order: usize,
    per_neuron: Vec<DMatrix<f64>>,
}

impl HistoryDesign {
    pub fn order(&self) -> usize {
        self.order
    }

    /// `T × (1+p)` design for neuron `n`.
    pub fn neuron(&self, n: usize) -> &DMatrix<f64> {
        &self.per_neuron[n]
    }

    pub fn row(&self, t: usize, n: usize) -> Vec<f64> {
        self.per_neuron[n].row(t).iter().copied().collect()
    }
}

pub fn build_history(counts: &DMatrix<f64>, p: usize) -> HistoryDesign {
    let len = counts.nrows();
    let per_neuron = (0..counts.ncols())
        .map(|n| {
            DMatrix::from_fn(len, 1 + p, |t, j| {
                if j == 0 {
                    return 1.0;
                }
                let lag = p + 1 - j;
                if t >= lag {
                    counts[(t - lag, n)]
                } else {
                    0.0
                }
            })
        })
        .collect();
    HistoryDesign { order: p, per_neuron }
}

#[derive(Debug, Clone)]
pub struct Trial {
    /// `T × N` spike counts.
    pub counts: DMatrix<f64>,
    pub history: HistoryDesign,
}

impl Trial {
    pub fn len(&self) -> usize {
        self.counts.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.nrows() == 0
    }
}

/// Trial-structured spike counts with their history designs.
#[derive(Debug, Clone)]
pub struct SpikeData {
    trials: Vec<Trial>,
    n_neurons: usize,
    history_order: usize,
    /// Bin width in seconds; metadata only.
    pub bin_width: f64,
}

impl SpikeData {
    pub fn new(counts: Vec<DMatrix<f64>>, bin_width: f64, history_order: usize) -> Result<Self> {
        let Some(first) = counts.first() else {
            return Err(Error::validation("spike data needs at least one trial"));
        };
        let n_neurons = first.ncols();
        if n_neurons == 0 {
            return Err(Error::validation("spike data needs at least one neuron"));
        }
        if !(bin_width.is_finite() && bin_width > 0.0) {
            return Err(Error::validation(format!("bin width must be positive, got {bin_width}")));
        }
        for (k, y) in counts.iter().enumerate() {
            if y.ncols() != n_neurons {
                return Err(Error::validation(format!(
                    "trial {k} has {} neurons, expected {n_neurons}",
                    y.ncols()
                )));
            }
            if y.nrows() == 0 {
                return Err(Error::validation(format!("trial {k} has no time bins")));
            }
            if let Some(bad) = y.iter().find(|&&c| !(c.is_finite() && c >= 0.0 && c.fract() == 0.0)) {
                return Err(Error::validation(format!(
                    "trial {k} contains {bad}, counts must be non-negative integers"
                )));
            }
        }
        let trials = counts
            .into_iter()
            .map(|counts| {
                let history = build_history(&counts, history_order);
                Trial { counts, history }
            })
            .collect();
        Ok(SpikeData {
            trials,
            n_neurons,
            history_order,
            bin_width,
        })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn trial(&self, k: usize) -> &Trial {
        &self.trials[k]
    }

    pub fn n_trials(&self) -> usize {
        self.trials.len()
    }

    pub fn n_neurons(&self) -> usize {
        self.n_neurons
    }

    pub fn history_order(&self) -> usize {
        self.history_order
    }

    pub fn trial_lengths(&self) -> Vec<usize> {
        self.trials.iter().map(Trial::len).collect()
    }

    pub fn total_bins(&self) -> usize {
        self.trials.iter().map(Trial::len).sum()
    }

    pub fn total_spikes(&self) -> f64 {
        self.trials.iter().map(|t| t.counts.sum()).sum()
    }

    /// New data set holding the listed trials, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<SpikeData> {
        if indices.is_empty() {
            return Err(Error::validation("trial subset is empty"));
        }
        let mut trials = Vec::with_capacity(indices.len());
        for &k in indices {
            let trial = self
                .trials
                .get(k)
                .ok_or_else(|| Error::validation(format!("trial index {k} out of range")))?;
            trials.push(trial.clone());
        }
        Ok(SpikeData {
            trials,
            n_neurons: self.n_neurons,
            history_order: self.history_order,
            bin_width: self.bin_width,
        })
    }
}

/// Loadings `alpha` (`N×L`) and bias/history weights `beta` (`N×(1+p)`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
}

impl ModelParams {
    pub fn new(alpha: DMatrix<f64>, beta: DMatrix<f64>) -> Result<Self> {
        if alpha.nrows() != beta.nrows() {
            return Err(Error::validation(format!(
                "alpha has {} neurons but beta has {}",
                alpha.nrows(),
                beta.nrows()
            )));
        }
        if beta.ncols() == 0 {
            return Err(Error::validation("beta needs at least the bias column"));
        }
        if alpha.iter().chain(beta.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("model parameters must be finite"));
        }
        Ok(ModelParams { alpha, beta })
    }

    pub fn n_neurons(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn history_order(&self) -> usize {
        self.beta.ncols() - 1
    }

    pub(crate) fn check_against(&self, data: &SpikeData) -> Result<()> {
        if self.n_neurons() != data.n_neurons() {
            return Err(Error::validation(format!(
                "parameters are for {} neurons, data has {}",
                self.n_neurons(),
                data.n_neurons()
            )));
        }
        if self.history_order() != data.history_order() {
            return Err(Error::validation(format!(
                "parameters use history order {}, data was built with {}",
                self.history_order(),
                data.history_order()
            )));
        }
        Ok(())
    }
}

/// Posterior of one trial: means `mu`, precision contributions `w` (the
/// diagonal of `W_l` per latent) and marginal variances `v`, all `T×L`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialPosterior {
    pub mu: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl TrialPosterior {
    pub fn len(&self) -> usize {
        self.mu.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.nrows() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub trials: Vec<TrialPosterior>,
}

impl LatentPosterior {
    /// Means at zero, `W = 0`, variances taken from the prior factors.
    pub fn from_prior(lengths: &[usize], priors: &[LatentPrior]) -> Self {
        let dim = priors.len();
        let trials = lengths
            .iter()
            .map(|&len| {
                let mut v = DMatrix::zeros(len, dim);
                for (l, prior) in priors.iter().enumerate() {
                    let g = prior.factor(len).g();
                    for t in 0..len {
                        v[(t, l)] = g.row(t).norm_squared();
                    }
                }
                TrialPosterior {
                    mu: DMatrix::zeros(len, dim),
                    w: DMatrix::zeros(len, dim),
                    v,
                }
            })
            .collect();
        LatentPosterior { trials }
    }
}

/// Whether neuron `n` takes part in likelihood sums under an optional mask.
#[inline]
pub(crate) fn included(mask: Option<&[bool]>, n: usize) -> bool {
    mask.is_none_or(|m| m[n])
}

/// `exp(β·h + α·μ + ½ Σ α² V)` with the exponent clamped at `cap`.
/// Returns the rate and whether the clamp was hit.
pub fn expected_rate_capped(
    mu_t: &[f64],
    v_t: &[f64],
    alpha_n: &[f64],
    beta_n: &[f64],
    h_tn: &[f64],
    cap: f64,
) -> (f64, bool) {
    let mut e: f64 = beta_n.iter().zip(h_tn).map(|(b, h)| b * h).sum();
    for ((a, m), v) in alpha_n.iter().zip(mu_t).zip(v_t) {
        e += a * m + 0.5 * a * a * v;
    }
    if e > cap {
        (cap.exp(), true)
    } else {
        (e.exp(), false)
    }
}

/// Expected firing rate of one neuron in one bin under the posterior.
pub fn expected_rate(mu_t: &[f64], v_t: &[f64], alpha_n: &[f64], beta_n: &[f64], h_tn: &[f64]) -> f64 {
    expected_rate_capped(mu_t, v_t, alpha_n, beta_n, h_tn, DEFAULT_EXP_CAP).0
}

/// Bias plus history contribution `β_n·h_{t,n}` for every bin of neuron `n`.
pub fn history_drive(trial: &Trial, n: usize, beta_n: &[f64]) -> DVector<f64> {
    trial.history.neuron(n) * DVector::from_column_slice(beta_n)
}

/// Linear predictor `β·h + α·μ` (`T×N`), without the variance correction.
pub fn linear_predictor(trial: &Trial, params: &ModelParams, mu: &DMatrix<f64>) -> DMatrix<f64> {
    let mut lin = mu * params.alpha.transpose();
    for n in 0..params.n_neurons() {
        let drive = trial.history.neuron(n) * params.beta.row(n).transpose();
        let mut col = lin.column_mut(n);
        col += drive;
    }
    lin
}

/// Log of the expected rate (before clamping), `T×N`.
pub fn rate_exponent(trial: &Trial, params: &ModelParams, post: &TrialPosterior) -> DMatrix<f64> {
    let alpha_sq = params.alpha.map(|a| a * a);
    let mut e = linear_predictor(trial, params, &post.mu);
    e += (&post.v * alpha_sq.transpose()) * 0.5;
    e
}

/// Elementwise `exp(min(e, cap))`, with the number of clamped entries.
pub fn rates_from_exponent(e: &DMatrix<f64>, cap: f64) -> (DMatrix<f64>, usize) {
    let mut clamped = 0;
    let lam = e.map(|x| {
        if x > cap {
            clamped += 1;
            cap.exp()
        } else {
            x.exp()
        }
    });
    (lam, clamped)
}

/// Point-process log-likelihood `Σ y log λ − λ` (the `log y!` term omitted).
pub fn pp_loglik(y: &DMatrix<f64>, lam: &DMatrix<f64>) -> Result<f64> {
    if y.shape() != lam.shape() {
        return Err(Error::validation(format!(
            "count shape {:?} does not match rate shape {:?}",
            y.shape(),
            lam.shape()
        )));
    }
    let mut total = 0.0;
    for (&c, &r) in y.iter().zip(lam.iter()) {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::validation(format!("rates must be positive, found {r}")));
        }
        total += c * r.ln() - r;
    }
    Ok(total)
}

/// Posterior algebra for one latent of one trial under `K ≈ G Gᵀ` and
/// `Σ = (K⁻¹ + W)⁻¹`, using only `r×r` solves with `B = Gᵀ W G`.
pub struct PosteriorFactor<'a> {
    factor: &'a CholFactor,
    w: DVector<f64>,
    b: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `(I + B)⁻¹`
    inv: DMatrix<f64>,
}

impl<'a> PosteriorFactor<'a> {
    pub fn new(factor: &'a CholFactor, w: DVector<f64>) -> Result<Self> {
        let g = factor.g();
        if w.len() != g.nrows() {
            return Err(Error::validation(format!(
                "W has {} entries, factor has {} rows",
                w.len(),
                g.nrows()
            )));
        }
        let root = w.map(|x| x.max(0.0).sqrt());
        let gw = DMatrix::from_fn(g.nrows(), g.ncols(), |t, j| g[(t, j)] * root[t]);
        let b = gw.transpose() * &gw;
        let r = b.nrows();
        let ipb = &b + DMatrix::<f64>::identity(r, r);
        let chol = ipb
            .cholesky()
            .ok_or_else(|| Error::numerical("I + B is not positive definite; W is corrupted"))?;
        let inv = chol.inverse();
        Ok(PosteriorFactor { factor, w, b, chol, inv })
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// `diag(Σ) = rowsum(G ∘ (G (I+B)⁻¹))`.
    pub fn variance(&self) -> DVector<f64> {
        let g = self.factor.g();
        let gm = g * &self.inv;
        DVector::from_fn(g.nrows(), |t, _| gm.row(t).dot(&g.row(t)))
    }

    /// `tr(K⁻¹Σ) = T − tr(B) + tr(B (I+B)⁻¹ B)`.
    pub fn trace_kinv_sigma(&self) -> f64 {
        let len = self.factor.len() as f64;
        let m_b = &self.inv * &self.b;
        len - self.b.trace() + m_b.component_mul(&self.b).sum()
    }

    /// `log det(K⁻¹Σ) = log det(I − B + B (I+B)⁻¹ B) = −log det(I + B)`.
    pub fn logdet_kinv_sigma(&self) -> f64 {
        let l = self.chol.l_dirty();
        -2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// `Σ x = G (I+B)⁻¹ Gᵀ x`.
    pub fn sigma_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let g = self.factor.g();
        g * (&self.inv * g.tr_mul(x))
    }

    /// `(I − G Gᵀ W + G B (I+B)⁻¹ Gᵀ W) u`, i.e. `(I + K W)⁻¹ u`.
    pub fn newton_apply(&self, u: &DVector<f64>) -> DVector<f64> {
        let g = self.factor.g();
        let wu = u.component_mul(&self.w);
        u - g * (&self.inv * g.tr_mul(&wu))
    }

    /// Gaussian KL divergence `KL(q ‖ p)` for this latent given the mean.
    pub fn kl(&self, mu: &DVector<f64>) -> f64 {
        let len = self.factor.len() as f64;
        0.5 * (self.factor.quad_form_inv(mu) + self.trace_kinv_sigma() - self.logdet_kinv_sigma() - len)
    }
}

/// The two parts of the bound for a trial or a data set.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElboTerms {
    /// `Σ y (α·μ + β·h) − λ` over included neurons.
    pub loglik: f64,
    /// `Σ_l KL(q_l ‖ p_l)`.
    pub kl: f64,
}

impl ElboTerms {
    pub fn value(&self) -> f64 {
        self.loglik - self.kl
    }
}

impl std::ops::Add for ElboTerms {
    type Output = ElboTerms;
    fn add(self, o: ElboTerms) -> ElboTerms {
        ElboTerms {
            loglik: self.loglik + o.loglik,
            kl: self.kl + o.kl,
        }
    }
}

/// Expected log-likelihood part of the bound for one trial.
pub fn trial_expected_loglik(
    trial: &Trial,
    params: &ModelParams,
    post: &TrialPosterior,
    mask: Option<&[bool]>,
    cap: f64,
) -> f64 {
    let lin = linear_predictor(trial, params, &post.mu);
    let alpha_sq = params.alpha.map(|a| a * a);
    let var = (&post.v * alpha_sq.transpose()) * 0.5;
    let mut total = 0.0;
    for n in 0..trial.counts.ncols() {
        if !included(mask, n) {
            continue;
        }
        for t in 0..trial.len() {
            let e = lin[(t, n)] + var[(t, n)];
            total += trial.counts[(t, n)] * lin[(t, n)] - e.min(cap).exp();
        }
    }
    total
}

/// KL terms of one trial, summed over latents.
pub fn trial_kl(post: &TrialPosterior, priors: &[LatentPrior]) -> Result<f64> {
    let len = post.len();
    let mut total = 0.0;
    for (l, prior) in priors.iter().enumerate() {
        let pf = PosteriorFactor::new(prior.factor(len), post.w.column(l).into_owned())?;
        total += pf.kl(&post.mu.column(l).into_owned());
    }
    Ok(total)
}

/// Gradient of the bound with the marginal variances `V` held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient {
    /// `∂L/∂μ` per trial (`T×L`).
    pub mu: Vec<DMatrix<f64>>,
    /// `∂L/∂α` (`N×L`).
    pub alpha: DMatrix<f64>,
    /// `∂L/∂β` (`N×(1+p)`).
    pub beta: DMatrix<f64>,
}

/// Analytic gradient of [`elbo`] in `μ`, `α` and `β` (rates uncapped):
/// `∂/∂μ_l = Σ_n (y_n − λ_n) α_{n,l} − K⁻¹μ_l`,
/// `∂/∂α_n = Σ_t (y − λ) μ_t − λ V_t ∘ α_n` and `∂/∂β_n = Σ_t (y − λ) h_t`.
pub fn elbo_gradient(
    data: &SpikeData,
    params: &ModelParams,
    posterior: &LatentPosterior,
    priors: &[LatentPrior],
) -> Result<ElboGradient> {
    params.check_against(data)?;
    let mut mu = Vec::with_capacity(data.n_trials());
    let mut alpha = DMatrix::zeros(params.n_neurons(), params.latent_dim());
    let mut beta = DMatrix::zeros(params.n_neurons(), params.beta.ncols());
    for (trial, post) in data.trials().iter().zip(&posterior.trials) {
        let lam = rate_exponent(trial, params, post).map(f64::exp);
        let resid = &trial.counts - &lam;
        let mut g_mu = &resid * &params.alpha;
        for (l, prior) in priors.iter().enumerate() {
            let kinv_mu = prior.factor(trial.len()).pinv_mul(&post.mu.column(l).into_owned());
            let mut col = g_mu.column_mut(l);
            col -= kinv_mu;
        }
        mu.push(g_mu);
        alpha += resid.transpose() * &post.mu;
        let lam_v = lam.transpose() * &post.v;
        alpha -= lam_v.component_mul(&params.alpha);
        for n in 0..params.n_neurons() {
            let g = trial.history.neuron(n).tr_mul(&resid.column(n));
            let mut row = beta.row_mut(n);
            row += g.transpose();
        }
    }
    Ok(ElboGradient { mu, alpha, beta })
}

pub fn trial_elbo(
    trial: &Trial,
    params: &ModelParams,
    post: &TrialPosterior,
    priors: &[LatentPrior],
    mask: Option<&[bool]>,
    cap: f64,
) -> Result<ElboTerms> {
    Ok(ElboTerms {
        loglik: trial_expected_loglik(trial, params, post, mask, cap),
        kl: trial_kl(post, priors)?,
    })
}

/// Evidence lower bound summed over trials in index order. Only neurons
/// with `mask[n] == true` enter the likelihood when a mask is given.
pub fn elbo_terms(
    data: &SpikeData,
    params: &ModelParams,
    posterior: &LatentPosterior,
    priors: &[LatentPrior],
    mask: Option<&[bool]>,
) -> Result<ElboTerms> {
    if posterior.trials.len() != data.n_trials() {
        return Err(Error::validation(format!(
            "posterior has {} trials, data has {}",
            posterior.trials.len(),
            data.n_trials()
        )));
    }
    if priors.len() != params.latent_dim() {
        return Err(Error::validation(format!(
            "{} priors for {} latent dimensions",
            priors.len(),
            params.latent_dim()
        )));
    }
    let mut total = ElboTerms::default();
    for (trial, post) in data.trials().iter().zip(&posterior.trials) {
        total = total + trial_elbo(trial, params, post, priors, mask, DEFAULT_EXP_CAP)?;
    }
    Ok(total)
}

pub fn elbo(data: &SpikeData, params: &ModelParams, posterior: &LatentPosterior, priors: &[LatentPrior]) -> Result<f64> {
    Ok(elbo_terms(data, params, posterior, priors, None)?.value())
}
