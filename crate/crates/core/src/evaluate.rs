//! Prediction and recovery metrics.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gp_prior::LatentPrior;
use crate::inference::{infer_posterior, FitConfig};
use crate::model::{expected_rate_capped, rate_exponent, rates_from_exponent, LatentPosterior, ModelParams, SpikeData};

/// Leave-one-neuron-out predictions for one neuron in one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronPrediction {
    pub trial: usize,
    pub neuron: usize,
    /// Predicted rate per bin.
    pub rate: DVector<f64>,
    /// Linear predictor `β·h + α·μ` per bin.
    pub eta: DVector<f64>,
    /// Realized counts per bin.
    pub counts: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub predictions: Vec<NeuronPrediction>,
    /// Population mean count per bin on the predicted data.
    pub baseline: f64,
}

impl PredictionSet {
    /// Builds a set and computes the population baseline from the counts.
    pub fn new(predictions: Vec<NeuronPrediction>) -> Result<Self> {
        let mut spikes = 0.0;
        let mut bins = 0usize;
        for p in &predictions {
            if p.rate.len() != p.counts.len() || p.eta.len() != p.counts.len() {
                return Err(Error::validation(format!(
                    "prediction for neuron {} in trial {} has mismatched lengths",
                    p.neuron, p.trial
                )));
            }
            if let Some(bad) = p.rate.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
                return Err(Error::validation(format!("predicted rates must be positive, found {bad}")));
            }
            spikes += p.counts.sum();
            bins += p.counts.len();
        }
        if bins == 0 {
            return Err(Error::validation("prediction set is empty"));
        }
        Ok(PredictionSet {
            predictions,
            baseline: spikes / bins as f64,
        })
    }

    pub fn total_spikes(&self) -> f64 {
        self.predictions.iter().map(|p| p.counts.sum()).sum()
    }
}

/// Predicts every neuron of every test trial from the others.
///
/// For neuron `n` the posterior is inferred with `n` masked out, then its rate
/// is the expected rate under that posterior using its own realized history.
pub fn lono_predict(
    test: &SpikeData,
    params: &ModelParams,
    priors: &[LatentPrior],
    config: &FitConfig,
) -> Result<PredictionSet> {
    let n_neurons = test.n_neurons();
    if n_neurons < 2 {
        return Err(Error::validation("leave-one-neuron-out needs at least two neurons"));
    }
    let per_neuron = (0..n_neurons)
        .into_par_iter()
        .map(|n| {
            let mut mask = vec![true; n_neurons];
            mask[n] = false;
            let posterior = infer_posterior(test, params, priors, config, Some(&mask))
                .map_err(|e| e.context(&format!("held-out neuron {n}")))?;
            Ok(predict_neuron(test, params, &posterior, n, config.exp_cap))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut predictions = Vec::with_capacity(n_neurons * test.n_trials());
    for k in 0..test.n_trials() {
        for per_trial in &per_neuron {
            predictions.push(per_trial[k].clone());
        }
    }
    PredictionSet::new(predictions)
}

fn predict_neuron(
    data: &SpikeData,
    params: &ModelParams,
    posterior: &LatentPosterior,
    n: usize,
    cap: f64,
) -> Vec<NeuronPrediction> {
    let alpha: Vec<f64> = params.alpha.row(n).iter().copied().collect();
    let beta: Vec<f64> = params.beta.row(n).iter().copied().collect();
    data.trials()
        .iter()
        .zip(&posterior.trials)
        .enumerate()
        .map(|(k, (trial, post))| {
            let len = trial.len();
            let mut rate = DVector::zeros(len);
            let mut eta = DVector::zeros(len);
            for t in 0..len {
                let mu: Vec<f64> = post.mu.row(t).iter().copied().collect();
                let v: Vec<f64> = post.v.row(t).iter().copied().collect();
                let h = trial.history.row(t, n);
                rate[t] = expected_rate_capped(&mu, &v, &alpha, &beta, &h, cap).0;
                eta[t] = alpha.iter().zip(&mu).map(|(a, m)| a * m).sum::<f64>()
                    + beta.iter().zip(&h).map(|(b, x)| b * x).sum::<f64>();
            }
            NeuronPrediction {
                trial: k,
                neuron: n,
                rate,
                eta,
                counts: trial.counts.column(n).into_owned(),
            }
        })
        .collect()
}

/// `Σ y log λ − λ` with `0 log 0 = 0`.
fn poisson_ll(y: f64, lam: f64) -> f64 {
    if y == 0.0 {
        -lam
    } else {
        y * lam.ln() - lam
    }
}

/// Predictive log-likelihood in bits per spike relative to the constant
/// population baseline.
pub fn pll(pred: &PredictionSet) -> Result<f64> {
    let spikes = pred.total_spikes();
    if !(spikes > 0.0) {
        return Err(Error::validation("PLL is undefined without spikes"));
    }
    let ybar = pred.baseline;
    let mut model = 0.0;
    let mut base = 0.0;
    for p in &pred.predictions {
        for (&y, &lam) in p.counts.iter().zip(p.rate.iter()) {
            model += poisson_ll(y, lam);
            base += poisson_ll(y, ybar);
        }
    }
    Ok((model - base) / (spikes * std::f64::consts::LN_2))
}

/// `log(1 + exp(a η)) / a`, evaluated without overflow.
pub fn rectified_rate_from_gaussian(eta: f64, a: f64) -> f64 {
    let x = a * eta;
    let sp = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    sp / a
}

/// `1 − SSE/SST` of a prediction against observed values.
pub fn predictive_r2(y: &[f64], prediction: &[f64]) -> Result<f64> {
    if y.len() != prediction.len() || y.is_empty() {
        return Err(Error::validation(format!(
            "R² needs equal non-empty series, got {} and {}",
            y.len(),
            prediction.len()
        )));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if !(sst > 0.0) {
        return Err(Error::validation("R² is undefined for a constant target"));
    }
    let sse: f64 = y.iter().zip(prediction).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

/// Predictive R² of the linear predictors pooled over a prediction set.
pub fn prediction_r2(pred: &PredictionSet) -> Result<f64> {
    let y: Vec<f64> = pred.predictions.iter().flat_map(|p| p.counts.iter().copied()).collect();
    let eta: Vec<f64> = pred.predictions.iter().flat_map(|p| p.eta.iter().copied()).collect();
    predictive_r2(&y, &eta)
}

/// Least-squares affine map from `inferred` onto `target` (both `T×·`).
/// Returns the mapped series and the `(1+L)×D` coefficients, intercept first.
pub fn align_affine(target: &DMatrix<f64>, inferred: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if target.nrows() != inferred.nrows() {
        return Err(Error::validation(format!(
            "alignment needs equal lengths, got {} and {}",
            target.nrows(),
            inferred.nrows()
        )));
    }
    let t = inferred.nrows();
    let design = DMatrix::from_fn(t, inferred.ncols() + 1, |i, j| if j == 0 { 1.0 } else { inferred[(i, j - 1)] });
    let coef = design
        .clone()
        .svd(true, true)
        .solve(target, 1e-12)
        .map_err(|e| Error::numerical(format!("alignment solve failed: {e}")))?;
    Ok((design * &coef, coef))
}

/// Mean squared error of `inferred` after affine alignment to `target`.
pub fn aligned_mse(target: &DMatrix<f64>, inferred: &DMatrix<f64>) -> Result<f64> {
    let (aligned, _) = align_affine(target, inferred)?;
    Ok((target - aligned).norm_squared() / target.len() as f64)
}

/// Mid-ranks (ties share the average rank), 1-based.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa > 0.0 && sbb > 0.0 {
        Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
    } else {
        None
    }
}

/// Spearman's rank correlation, `None` when either series is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&ranks(a), &ranks(b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankCorrelation {
    /// Mean `|ρ|` over the defined dimensions.
    pub mean_abs: f64,
    /// `ρ` per true dimension; `None` where it is undefined.
    pub per_dim: Vec<Option<f64>>,
    /// Dimensions left out because a series was constant.
    pub degenerate: Vec<usize>,
}

/// Mean Spearman correlation between true latents and affinely aligned
/// inferred latents, one coefficient per true dimension.
pub fn rank_correlation(true_x: &DMatrix<f64>, inferred: &DMatrix<f64>) -> Result<RankCorrelation> {
    let (aligned, _) = align_affine(true_x, inferred)?;
    let mut per_dim = Vec::with_capacity(true_x.ncols());
    let mut degenerate = vec![];
    for d in 0..true_x.ncols() {
        let a: Vec<f64> = true_x.column(d).iter().copied().collect();
        let b: Vec<f64> = aligned.column(d).iter().copied().collect();
        let rho = spearman(&a, &b);
        if rho.is_none() {
            degenerate.push(d);
        }
        per_dim.push(rho);
    }
    let defined: Vec<f64> = per_dim.iter().flatten().map(|r| r.abs()).collect();
    if defined.is_empty() {
        return Err(Error::validation("rank correlation is undefined: every dimension is constant"));
    }
    Ok(RankCorrelation {
        mean_abs: defined.iter().sum::<f64>() / defined.len() as f64,
        per_dim,
        degenerate,
    })
}

/// Rank correlation over trials stacked in time.
pub fn rank_correlation_trials(true_x: &[DMatrix<f64>], inferred: &[DMatrix<f64>]) -> Result<RankCorrelation> {
    rank_correlation(&stack_rows(true_x)?, &stack_rows(inferred)?)
}

/// Concatenates matrices with equal column counts along rows.
pub fn stack_rows(parts: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let cols = parts.first().map_or(0, |m| m.ncols());
    if parts.iter().any(|m| m.ncols() != cols) {
        return Err(Error::validation("cannot stack matrices with different column counts"));
    }
    let rows: usize = parts.iter().map(|m| m.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for m in parts {
        out.rows_mut(at, m.nrows()).copy_from(m);
        at += m.nrows();
    }
    Ok(out)
}

/// `1 − (LL_sat − LL_model)/(LL_sat − LL_null)`.
pub fn pseudo_r2(ll_model: f64, ll_null: f64, ll_saturated: f64) -> Result<f64> {
    let span = ll_saturated - ll_null;
    if !(span.abs() > 0.0) || !span.is_finite() {
        return Err(Error::validation("pseudo-R² is undefined when the null and saturated models agree"));
    }
    Ok(1.0 - (ll_saturated - ll_model) / span)
}

/// Log-likelihood of a single constant rate, the mean count over every bin,
/// neuron and trial.
pub fn ll_null(counts: &[DMatrix<f64>]) -> Result<f64> {
    let bins: usize = counts.iter().map(|c| c.len()).sum();
    if bins == 0 {
        return Err(Error::validation("no bins to score"));
    }
    let mean = counts.iter().map(|c| c.sum()).sum::<f64>() / bins as f64;
    Ok(counts.iter().flat_map(|c| c.iter()).map(|&y| poisson_ll(y, mean)).sum())
}

/// Log-likelihood of the per-bin, per-neuron mean across repeated trials.
pub fn ll_saturated(counts: &[DMatrix<f64>]) -> Result<f64> {
    let mean = trial_mean(counts)?;
    Ok(counts
        .iter()
        .map(|c| c.iter().zip(mean.iter()).map(|(&y, &m)| poisson_ll(y, m)).sum::<f64>())
        .sum())
}

fn trial_mean(counts: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = counts.first().ok_or_else(|| Error::validation("no trials"))?;
    if counts.iter().any(|c| c.shape() != first.shape()) {
        return Err(Error::validation("repeated trials must share one shape"));
    }
    let mut mean = DMatrix::zeros(first.nrows(), first.ncols());
    for c in counts {
        mean += c;
    }
    Ok(mean / counts.len() as f64)
}

/// Model log-likelihood of the expected rates under a fitted posterior.
pub fn ll_model(data: &SpikeData, params: &ModelParams, posterior: &LatentPosterior, cap: f64) -> f64 {
    data.trials()
        .iter()
        .zip(&posterior.trials)
        .map(|(trial, post)| {
            let (lam, _) = rates_from_exponent(&rate_exponent(trial, params, post), cap);
            trial.counts.iter().zip(lam.iter()).map(|(&y, &l)| poisson_ll(y, l)).sum::<f64>()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Orthogonalized {
    pub latents: Vec<DMatrix<f64>>,
    /// Orthogonal `L×L` map; rotated latents are `μ R`, loadings `α R`.
    pub rotation: DMatrix<f64>,
    pub singular_values: DVector<f64>,
}

/// Rotates latents so that their dimensions are orthogonal and ordered by
/// decreasing singular value.
///
/// The rotation comes from the SVD of the trial-averaged means when all
/// trials have one length, otherwise of the trials stacked in time.
pub fn orthogonalize_latents(mus: &[DMatrix<f64>]) -> Result<Orthogonalized> {
    let first = mus.first().ok_or_else(|| Error::validation("no latents to orthogonalize"))?;
    let reference = if mus.iter().all(|m| m.shape() == first.shape()) {
        trial_mean(mus)?
    } else {
        stack_rows(mus)?
    };
    let l = reference.ncols();
    let svd = reference.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::numerical("SVD did not return right vectors"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut rotation = DMatrix::zeros(l, l);
    for (j, &k) in order.iter().enumerate() {
        rotation.set_column(j, &v_t.row(k).transpose());
    }
    if order.len() < l {
        return Err(Error::validation("orthogonalization needs at least as many bins as latent dimensions"));
    }
    let singular_values = DVector::from_iterator(l, order.iter().map(|&k| svd.singular_values[k]));
    Ok(Orthogonalized {
        latents: mus.iter().map(|m| m * &rotation).collect(),
        rotation,
        singular_values,
    })
}

/// `1 − ‖C_model − C_true‖_F / ‖C_true‖_F`.
pub fn noise_corr_power(c_model: &DMatrix<f64>, c_true: &DMatrix<f64>) -> Result<f64> {
    if c_model.shape() != c_true.shape() || !c_true.is_square() {
        return Err(Error::validation(format!(
            "noise correlation matrices must be square and equal in shape, got {:?} and {:?}",
            c_model.shape(),
            c_true.shape()
        )));
    }
    let denom = c_true.norm();
    if !(denom > 0.0) {
        return Err(Error::validation("true noise correlation matrix is zero"));
    }
    Ok(1.0 - (c_model - c_true).norm() / denom)
}

/// Sums consecutive groups of `group` bins; a trailing partial group is dropped.
pub fn rebin(counts: &DMatrix<f64>, group: usize) -> DMatrix<f64> {
    let rows = counts.nrows() / group.max(1);
    DMatrix::from_fn(rows, counts.ncols(), |i, n| counts.view((i * group, n), (group, 1)).sum())
}

/// Pairwise noise correlations of repeated trials with zero diagonal.
///
/// Counts are rebinned, the mean across trials is subtracted per bin, and
/// Pearson correlations are taken over all residuals. Pairs involving a
/// neuron without residual variance get zero.
pub fn noise_correlation(counts: &[DMatrix<f64>], bin_group: usize) -> Result<DMatrix<f64>> {
    if bin_group == 0 {
        return Err(Error::validation("bin_group must be positive"));
    }
    if counts.len() < 2 {
        return Err(Error::validation("noise correlations need at least two trials"));
    }
    let rebinned: Vec<DMatrix<f64>> = counts.iter().map(|c| rebin(c, bin_group)).collect();
    let mean = trial_mean(&rebinned)?;
    if mean.nrows() == 0 {
        return Err(Error::validation("trials are shorter than one rebinned bin"));
    }
    let residuals: Vec<DMatrix<f64>> = rebinned.iter().map(|c| c - &mean).collect();
    let r = stack_rows(&residuals)?;
    let n = r.ncols();
    let m = r.nrows() as f64;
    let cov = r.tr_mul(&r) / m;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let d = (cov[(i, i)] * cov[(j, j)]).sqrt();
        if i == j || !(d > 0.0) {
            0.0
        } else {
            (cov[(i, j)] / d).clamp(-1.0, 1.0)
        }
    }))
}

/// Noise correlations of Poisson spike trains drawn from the fitted rates.
///
/// Every trial's expected rates are sampled `n_sims` times, and the pooled
/// draws are treated as repeats of one condition.
pub fn noise_corr_from_model(
    params: &ModelParams,
    posterior: &LatentPosterior,
    data: &SpikeData,
    n_sims: usize,
    bin_group: usize,
    seed: u64,
    cap: f64,
) -> Result<DMatrix<f64>> {
    if n_sims == 0 {
        return Err(Error::validation("n_sims must be positive"));
    }
    if posterior.trials.len() != data.n_trials() {
        return Err(Error::validation("posterior and data disagree on the number of trials"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(n_sims * data.n_trials());
    for (trial, post) in data.trials().iter().zip(&posterior.trials) {
        let (lam, _) = rates_from_exponent(&rate_exponent(trial, params, post), cap);
        for _ in 0..n_sims {
            let y = lam.map(|r| {
                Poisson::new(r)
                    .map(|d| d.sample(&mut rng))
                    .unwrap_or(0.0)
            });
            draws.push(y);
        }
    }
    noise_correlation(&draws, bin_group)
}

/// Largest principal angle between the column spans of two matrices.
pub fn subspace_angle(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() || a.ncols() == 0 || b.ncols() == 0 {
        return Err(Error::validation(format!(
            "subspace angle needs matrices with equal row counts, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (wide, narrow) = if a.ncols() >= b.ncols() { (a, b) } else { (b, a) };
    let qa = orthonormal_basis(wide)?;
    let qb = orthonormal_basis(narrow)?;
    // the sines of the principal angles are the singular values of the part of
    // the narrower basis outside the wider span; this stays accurate near zero
    let outside = &qb - &qa * qa.tr_mul(&qb);
    let largest = outside.singular_values().amax();
    Ok(largest.clamp(0.0, 1.0).asin())
}

fn orthonormal_basis(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let qr = a.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    if !(scale > 0.0) || r.diagonal().iter().any(|d| d.abs() <= 1e-12 * scale) {
        return Err(Error::validation("subspace angle needs full column rank"));
    }
    Ok(qr.q())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{dmatrix, dvector};
    use std::f64::consts::{FRAC_PI_2, LN_2};

    fn set(counts: Vec<f64>, rate: Vec<f64>) -> PredictionSet {
        let n = counts.len();
        PredictionSet::new(vec![NeuronPrediction {
            trial: 0,
            neuron: 0,
            rate: DVector::from_vec(rate),
            eta: DVector::zeros(n),
            counts: DVector::from_vec(counts),
        }])
        .unwrap()
    }

    #[test]
    fn pll_of_baseline_is_zero() {
        let p = set(vec![1.0, 0.0, 2.0, 1.0], vec![1.0; 4]);
        assert_eq!(p.baseline, 1.0);
        assert_eq!(pll(&p).unwrap(), 0.0);
    }

    #[test]
    fn pll_hand_example() {
        let tiny = 1e-9;
        let p = set(vec![1.0, 0.0], vec![1.0, tiny]);
        assert_eq!(p.baseline, 0.5);
        let expected = ((1.0f64.ln() - 1.0 - tiny) - (0.5f64.ln() - 0.5 - 0.5)) / LN_2;
        assert_relative_eq!(pll(&p).unwrap(), expected, max_relative = 1e-14);
        assert_relative_eq!(expected, 1.0 - tiny / LN_2, max_relative = 1e-12);
    }

    #[test]
    fn pll_without_spikes_is_an_error() {
        let p = set(vec![0.0, 0.0], vec![0.1, 0.1]);
        assert!(pll(&p).is_err());
    }

    #[test]
    fn pll_defined_after_splitting_bins() {
        let coarse = set(vec![1.0, 0.0, 2.0], vec![1.0, 0.5, 1.5]);
        let fine = set(vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0], vec![0.5, 0.5, 0.25, 0.25, 0.75, 0.75]);
        assert!(pll(&coarse).unwrap().is_finite());
        assert!(pll(&fine).unwrap().is_finite());
    }

    #[test]
    fn pll_rejects_nonpositive_rate() {
        let bad = PredictionSet::new(vec![NeuronPrediction {
            trial: 0,
            neuron: 0,
            rate: dvector![0.0],
            eta: dvector![0.0],
            counts: dvector![1.0],
        }]);
        assert!(bad.is_err());
    }

    #[test]
    fn rectifier_examples() {
        assert_relative_eq!(rectified_rate_from_gaussian(1.0, 500.0), 1.0, max_relative = 1e-12);
        let neg = rectified_rate_from_gaussian(-1.0, 500.0);
        assert!(neg > 0.0);
        assert_relative_eq!(neg, (-500.0f64).exp() / 500.0, max_relative = 1e-12);
        assert_relative_eq!(rectified_rate_from_gaussian(0.0, 500.0), LN_2 / 500.0, max_relative = 1e-15);
        assert_relative_eq!(rectified_rate_from_gaussian(0.0, 500.0), 0.0013863, max_relative = 1e-4);
    }

    #[test]
    fn r2_examples() {
        let y = [1.0, 2.0, 3.0, 6.0];
        assert_eq!(predictive_r2(&y, &y).unwrap(), 1.0);
        assert_eq!(predictive_r2(&y, &[3.0; 4]).unwrap(), 0.0);
        // residual about the mean is (−2,−1,0,3); this offset is orthogonal to it
        let offset = [1.0, -2.0, 1.0, 0.0];
        let pred: Vec<f64> = offset.iter().map(|o| 3.0 + o).collect();
        let sst = 4.0 + 1.0 + 0.0 + 9.0;
        let sse: f64 = y.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum();
        assert_relative_eq!(sse, sst + 6.0);
        let r2 = predictive_r2(&y, &pred).unwrap();
        assert_relative_eq!(r2, -6.0 / 14.0, max_relative = 1e-14);
        assert!(predictive_r2(&[1.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn ranks_share_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn rank_correlation_examples() {
        let x = DMatrix::from_fn(200, 1, |t, _| (t as f64 * 0.05).sin() + 0.001 * t as f64);
        assert_relative_eq!(rank_correlation(&x, &x).unwrap().mean_abs, 1.0, max_relative = 1e-12);
        let cube = x.map(|v| v * v * v);
        assert_relative_eq!(rank_correlation(&x, &cube).unwrap().mean_abs, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn rank_correlation_of_noise_is_small() {
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = DMatrix::from_fn(1000, 1, |_, _| StandardNormal.sample(&mut rng));
        let y = DMatrix::from_fn(1000, 1, |_, _| StandardNormal.sample(&mut rng));
        assert!(rank_correlation(&x, &y).unwrap().mean_abs <= 0.05);
    }

    #[test]
    fn constant_dimension_is_flagged() {
        let x = DMatrix::from_fn(50, 2, |t, j| if j == 0 { t as f64 } else { 1.0 });
        let rc = rank_correlation(&x, &x.columns(0, 1).into_owned()).unwrap();
        assert_eq!(rc.degenerate, vec![1]);
        assert_eq!(rc.per_dim[1], None);
        assert_relative_eq!(rc.mean_abs, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn pseudo_r2_examples() {
        assert_eq!(pseudo_r2(-10.0, -50.0, -10.0).unwrap(), 1.0);
        assert_eq!(pseudo_r2(-50.0, -50.0, -10.0).unwrap(), 0.0);
        assert_eq!(pseudo_r2(-30.0, -50.0, -10.0).unwrap(), 0.5);
        assert!(pseudo_r2(-1.0, -5.0, -5.0).is_err());
    }

    #[test]
    fn null_and_saturated_likelihoods() {
        let a = dmatrix![1.0, 0.0; 0.0, 2.0];
        let b = dmatrix![1.0, 0.0; 2.0, 0.0];
        // population mean 6/8 = 0.75
        let null = ll_null(&[a.clone(), b.clone()]).unwrap();
        assert_relative_eq!(null, 6.0 * 0.75f64.ln() - 8.0 * 0.75, max_relative = 1e-14);
        // per-bin means: [1, 0; 1, 1]
        let sat = ll_saturated(&[a, b]).unwrap();
        let expected = (0.0 - 1.0) + 0.0 + (0.0 - 1.0) + (2.0 * 1.0f64.ln() - 1.0) + (0.0 - 1.0) + 0.0 + (2.0 * 1.0f64.ln() - 1.0) + (0.0 - 1.0);
        assert_relative_eq!(sat, expected, max_relative = 1e-14);
        assert!(sat >= null);
    }

    #[test]
    fn orthogonal_input_is_unchanged_up_to_sign() {
        let mu = dmatrix![3.0, 0.0; 0.0, 1.0; -3.0, 0.0; 0.0, -1.0];
        let out = orthogonalize_latents(std::slice::from_ref(&mu)).unwrap();
        for (a, b) in out.latents[0].iter().zip(mu.iter()) {
            assert_relative_eq!(a.abs(), b.abs(), epsilon = 1e-12);
        }
        assert_relative_eq!(out.singular_values, dvector![18.0f64.sqrt(), 2.0f64.sqrt()], max_relative = 1e-12);
    }

    #[test]
    fn rank_one_input_goes_to_first_dimension() {
        let mu = DMatrix::from_fn(30, 3, |t, j| (t as f64 - 14.5) * [1.0, -2.0, 0.5][j]);
        let out = orthogonalize_latents(&[mu]).unwrap();
        let rest = out.latents[0].columns(1, 2).norm();
        assert!(rest <= 1e-10 * out.latents[0].norm());
    }

    #[test]
    fn rotation_preserves_rates() {
        let mu1 = DMatrix::from_fn(40, 2, |t, j| ((t * (j + 1)) as f64 * 0.3).sin());
        let mu2 = DMatrix::from_fn(40, 2, |t, j| ((t + j) as f64 * 0.2).cos());
        let alpha = dmatrix![0.5, -1.0; 1.0, 0.2; -0.3, 0.7];
        let out = orthogonalize_latents(&[mu1.clone(), mu2.clone()]).unwrap();
        let alpha_rot = &alpha * &out.rotation;
        for (orig, rot) in [mu1, mu2].iter().zip(&out.latents) {
            let before = orig * alpha.transpose();
            let after = rot * alpha_rot.transpose();
            assert_relative_eq!(before, after, max_relative = 1e-10, epsilon = 1e-12);
        }
        let mean = (&out.latents[0] + &out.latents[1]) / 2.0;
        let gram = mean.tr_mul(&mean);
        assert!(gram[(0, 1)].abs() <= 1e-10 * gram[(0, 0)]);
        assert!(out.singular_values[0] >= out.singular_values[1]);
    }

    #[test]
    fn noise_corr_power_examples() {
        let c = dmatrix![0.0, 0.3, -0.1; 0.3, 0.0, 0.2; -0.1, 0.2, 0.0];
        assert_eq!(noise_corr_power(&c, &c).unwrap(), 1.0);
        assert_eq!(noise_corr_power(&DMatrix::zeros(3, 3), &c).unwrap(), 0.0);
        assert_relative_eq!(noise_corr_power(&(-&c), &c).unwrap(), -1.0, max_relative = 1e-14);
    }

    #[test]
    fn rebin_sums_groups() {
        let c = dmatrix![1.0; 2.0; 3.0; 4.0; 5.0];
        assert_eq!(rebin(&c, 2), dmatrix![3.0; 7.0]);
    }

    #[test]
    fn noise_correlation_of_shared_fluctuation() {
        // neuron 1 copies neuron 0's deviation, neuron 2 mirrors it
        let trials: Vec<DMatrix<f64>> = (0..4)
            .map(|k| {
                let d = if k % 2 == 0 { 1.0 } else { -1.0 };
                DMatrix::from_fn(3, 3, |t, n| 5.0 + t as f64 + [d, d, -d][n])
            })
            .collect();
        let c = noise_correlation(&trials, 1).unwrap();
        assert_relative_eq!(c, dmatrix![0.0, 1.0, -1.0; 1.0, 0.0, -1.0; -1.0, -1.0, 0.0], epsilon = 1e-12);
    }

    #[test]
    fn subspace_angle_examples() {
        let a = dmatrix![1.0; 0.0; 0.0];
        let b = dmatrix![0.0; 1.0; 0.0];
        assert_relative_eq!(subspace_angle(&a, &a).unwrap(), 0.0, epsilon = 1e-14);
        assert_relative_eq!(subspace_angle(&a, &b).unwrap(), FRAC_PI_2, epsilon = 1e-12);
        let s = 0.5f64.sqrt();
        let plane = dmatrix![1.0, 0.0; 0.0, 1.0];
        let tilted = dmatrix![1.0, s; 0.0, s];
        assert_relative_eq!(subspace_angle(&plane, &tilted).unwrap(), 0.0, epsilon = 1e-14);
    }
}
