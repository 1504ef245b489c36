//! Starting values: loadings and latent means from factor analysis, bias and
//! history weights from least squares on the counts.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{ModelParams, SpikeData};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitOptions {
    pub fa_max_iter: usize,
    pub fa_tol: f64,
    /// Ridge penalty used when a history design is rank deficient.
    pub ridge: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            fa_max_iter: 100,
            fa_tol: 1e-6,
            ridge: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FaResult {
    /// `N×L`
    pub loading: DMatrix<f64>,
    /// Posterior means `E[x | y]`, one row per input row.
    pub latent_mean: DMatrix<f64>,
    pub noise_var: DVector<f64>,
    pub converged: bool,
    /// Log-likelihood after each EM iteration.
    pub loglik_trace: Vec<f64>,
}

fn fa_loglik(cov: &DMatrix<f64>, loading: &DMatrix<f64>, psi: &DVector<f64>, m: usize) -> Option<f64> {
    let n = cov.nrows();
    let c = loading * loading.transpose() + DMatrix::from_diagonal(psi);
    let chol = c.cholesky()?;
    let l = chol.l_dirty();
    let logdet: f64 = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    let trace = chol.solve(cov).trace();
    Some(-0.5 * m as f64 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + trace))
}

/// Factor analysis `y ≈ Λx + ε` by EM on the sample covariance.
///
/// Rows of `y` are observations; columns are centered internally. Loadings
/// start from the leading principal components. Noise variances are floored
/// at `1e-6` times the average sample variance.
pub fn factor_analysis(y: &DMatrix<f64>, latent_dim: usize, max_iter: usize, tol: f64) -> Result<FaResult> {
    let (m, n) = y.shape();
    if latent_dim == 0 || latent_dim >= n {
        return Err(Error::validation(format!(
            "factor analysis needs 1 <= L < N, got L={latent_dim}, N={n}"
        )));
    }
    if m < 2 {
        return Err(Error::validation("factor analysis needs at least two observations"));
    }
    let mean = y.row_mean();
    let mut yc = y.clone();
    for mut row in yc.row_iter_mut() {
        row -= &mean;
    }
    let cov = yc.tr_mul(&yc) / m as f64;
    let avg_var = cov.trace() / n as f64;
    let floor = (1e-6 * avg_var).max(1e-12);

    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let rest: f64 = order[latent_dim..].iter().map(|&i| eig.eigenvalues[i].max(0.0)).sum();
    let noise_level = rest / (n - latent_dim) as f64;
    let mut loading = DMatrix::from_fn(n, latent_dim, |i, j| {
        let k = order[j];
        eig.eigenvectors[(i, k)] * (eig.eigenvalues[k] - noise_level).max(floor).sqrt()
    });
    let mut psi = DVector::from_fn(n, |i, _| {
        (cov[(i, i)] - loading.row(i).norm_squared()).max(floor)
    });

    let mut best = fa_loglik(&cov, &loading, &psi, m)
        .ok_or_else(|| Error::numerical("factor-analysis covariance is not positive definite"))?;
    let mut best_state = (loading.clone(), psi.clone());
    let mut trace = Vec::with_capacity(max_iter);
    let mut converged = false;
    let eye = DMatrix::<f64>::identity(latent_dim, latent_dim);
    for _ in 0..max_iter {
        // E-step in the L-dimensional form: β = (I + ΛᵀΨ⁻¹Λ)⁻¹ ΛᵀΨ⁻¹.
        let psi_inv_l = DMatrix::from_fn(n, latent_dim, |i, j| loading[(i, j)] / psi[i]);
        let inner = (&eye + loading.tr_mul(&psi_inv_l))
            .cholesky()
            .ok_or_else(|| Error::numerical("factor-analysis E-step is singular"))?;
        let beta = inner.solve(&psi_inv_l.transpose());
        let beta_cov = &beta * &cov;
        let exx = inner.inverse() + &beta_cov * beta.transpose();
        let exx_chol = exx
            .cholesky()
            .ok_or_else(|| Error::numerical("factor-analysis second moment is singular"))?;
        loading = exx_chol.solve(&beta_cov).transpose();
        let lbc = &loading * &beta_cov;
        psi = DVector::from_fn(n, |i, _| (cov[(i, i)] - lbc[(i, i)]).max(floor));

        let ll = fa_loglik(&cov, &loading, &psi, m)
            .ok_or_else(|| Error::numerical("factor-analysis covariance is not positive definite"))?;
        trace.push(ll);
        let gain = ll - best;
        if ll >= best {
            best = ll;
            best_state = (loading.clone(), psi.clone());
        }
        if gain.abs() <= tol * best.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("factor analysis did not converge in {max_iter} iterations");
    }
    let (loading, psi) = best_state;

    let psi_inv_l = DMatrix::from_fn(n, latent_dim, |i, j| loading[(i, j)] / psi[i]);
    let inner = (&eye + loading.tr_mul(&psi_inv_l))
        .cholesky()
        .ok_or_else(|| Error::numerical("factor-analysis E-step is singular"))?;
    let latent_mean = inner.solve(&psi_inv_l.tr_mul(&yc.transpose())).transpose();
    Ok(FaResult {
        loading,
        latent_mean,
        noise_var: psi,
        converged,
        loglik_trace: trace,
    })
}

#[derive(Debug, Clone)]
pub struct HistoryInit {
    /// `N×(1+p)`
    pub beta: DMatrix<f64>,
    /// Neurons whose design was rank deficient and got the ridge fallback.
    pub ridge_neurons: Vec<usize>,
}

/// Ordinary least squares of each neuron's counts on its history design,
/// pooled over trials.
pub fn init_history_weights(data: &SpikeData) -> Result<HistoryInit> {
    init_history_weights_with(data, InitOptions::default().ridge)
}

pub fn init_history_weights_with(data: &SpikeData, ridge: f64) -> Result<HistoryInit> {
    let width = 1 + data.history_order();
    let mut beta = DMatrix::zeros(data.n_neurons(), width);
    let mut ridge_neurons = Vec::new();
    for n in 0..data.n_neurons() {
        let mut hth = DMatrix::zeros(width, width);
        let mut hty = DVector::zeros(width);
        for trial in data.trials() {
            let h = trial.history.neuron(n);
            hth += h.tr_mul(h);
            hty += h.tr_mul(&trial.counts.column(n));
        }
        let eig = SymmetricEigen::new(hth.clone());
        let max_eig = eig.eigenvalues.max();
        let min_eig = eig.eigenvalues.min();
        let deficient = !(min_eig > 1e-12 * max_eig.max(1.0));
        if deficient {
            ridge_neurons.push(n);
            for i in 0..width {
                hth[(i, i)] += ridge;
            }
        }
        let sol = hth
            .cholesky()
            .ok_or_else(|| Error::numerical(format!("history regression for neuron {n} is singular")))?
            .solve(&hty);
        beta.set_row(n, &sol.transpose());
    }
    Ok(HistoryInit { beta, ridge_neurons })
}

#[derive(Debug, Clone)]
pub struct Initialization {
    pub params: ModelParams,
    /// `T×L` latent means per trial, before projection onto the prior.
    pub latent_means: Vec<DMatrix<f64>>,
    pub fa_converged: bool,
    pub ridge_neurons: Vec<usize>,
}

/// Loadings from factor analysis, normalized to unit max-norm per column;
/// latent means are the factor-analysis posterior means split by trial.
pub fn initialize(data: &SpikeData, latent_dim: usize, opts: &InitOptions) -> Result<Initialization> {
    let total = data.total_bins();
    let n = data.n_neurons();
    let mut stacked = DMatrix::zeros(total, n);
    let mut row = 0;
    for trial in data.trials() {
        stacked.rows_mut(row, trial.len()).copy_from(&trial.counts);
        row += trial.len();
    }
    let fa = factor_analysis(&stacked, latent_dim, opts.fa_max_iter, opts.fa_tol)?;
    let mut alpha = fa.loading;
    for mut col in alpha.column_iter_mut() {
        let s = col.amax();
        if s > 0.0 {
            col /= s;
        }
    }
    let history = init_history_weights_with(data, opts.ridge)?;
    let mut latent_means = Vec::with_capacity(data.n_trials());
    let mut row = 0;
    for trial in data.trials() {
        latent_means.push(fa.latent_mean.rows(row, trial.len()).into_owned());
        row += trial.len();
    }
    Ok(Initialization {
        params: ModelParams::new(alpha, history.beta)?,
        latent_means,
        fa_converged: fa.converged,
        ridge_neurons: history.ridge_neurons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Poisson};

    #[test]
    fn bias_only_regression_is_the_mean() {
        let y = DMatrix::from_column_slice(4, 2, &[1.0, 0.0, 3.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
        let data = SpikeData::new(vec![y], 0.001, 0).unwrap();
        let init = init_history_weights(&data).unwrap();
        assert!((init.beta[(0, 0)] - 1.5).abs() < 1e-12);
        assert!((init.beta[(1, 0)] - 0.5).abs() < 1e-12);
        assert!(init.ridge_neurons.is_empty());
    }

    #[test]
    fn silent_neuron_gets_ridge() {
        let y = DMatrix::from_column_slice(5, 2, &[0.0; 10]);
        let data = SpikeData::new(vec![y], 0.001, 2).unwrap();
        let init = init_history_weights(&data).unwrap();
        assert_eq!(init.ridge_neurons, vec![0, 1]);
        assert!(init.beta.iter().all(|b| b.is_finite()));
    }

    #[test]
    fn loglik_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let lam = DMatrix::from_fn(8, 2, |_, _| normal.sample(&mut rng));
        let x = DMatrix::from_fn(500, 2, |_, _| normal.sample(&mut rng));
        let mut y = &x * lam.transpose();
        for v in y.iter_mut() {
            *v += 0.3 * normal.sample(&mut rng);
        }
        let fa = factor_analysis(&y, 2, 200, 0.0).unwrap();
        for w in fa.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
        assert!(fa.noise_var.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn initialization_is_finite_on_poisson_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let counts: Vec<DMatrix<f64>> = (0..2)
            .map(|_| {
                DMatrix::from_fn(50, 6, |t, n| {
                    let rate = 0.5 + 0.4 * ((t as f64) * 0.1 + n as f64).sin();
                    Poisson::new(rate).unwrap().sample(&mut rng)
                })
            })
            .collect();
        let data = SpikeData::new(counts, 0.001, 3).unwrap();
        let init = initialize(&data, 2, &InitOptions::default()).unwrap();
        assert!(init.params.alpha.iter().all(|a| a.is_finite()));
        for col in init.params.alpha.column_iter() {
            assert!((col.amax() - 1.0).abs() < 1e-12);
        }
        assert_eq!(init.latent_means.len(), 2);
        assert_eq!(init.latent_means[0].shape(), (50, 2));
    }

    #[test]
    fn rejects_too_many_factors() {
        let y = DMatrix::from_element(10, 3, 1.0);
        assert!(factor_analysis(&y, 3, 10, 1e-6).is_err());
    }
}
