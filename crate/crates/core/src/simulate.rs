//! Synthetic data: Gaussian-process, Lorenz and linear-dynamical latents, and
//! spike counts from the history-dependent point process or a softplus
//! Poisson observation.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_prior::{dense_kernel, KernelSpec};
use crate::model::DEFAULT_EXP_CAP;

/// Suppressive history filter, most recent lag first.
pub const DEFAULT_HISTORY_FILTER: [f64; 10] = [-10.0, -10.0, -3.0, -3.0, -3.0, -3.0, -2.0, -2.0, -1.0, -1.0];

pub const LORENZ_SIGMA: f64 = 10.0;
pub const LORENZ_RHO: f64 = 28.0;
pub const LORENZ_BETA: f64 = 2.667;

fn standard_normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// RNG for one trial: the seed's stream `trial + 1`. Stream 0 draws the
/// shared parameters.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64 + 1);
    rng
}

/// Columns drawn independently from `N(0, K)`.
pub fn sample_gp_latent(len: usize, latent_dim: usize, spec: &KernelSpec, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_gp_latent_with(len, latent_dim, spec, &mut rng)
}

pub fn sample_gp_latent_with(len: usize, latent_dim: usize, spec: &KernelSpec, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let base = dense_kernel(len, &KernelSpec { jitter: 0.0, ..*spec });
    let mut jitter = spec.jitter.max(1e-10 * spec.sigma2);
    let chol = loop {
        let mut k = base.clone();
        for i in 0..len {
            k[(i, i)] += jitter;
        }
        if let Some(c) = k.cholesky() {
            break c;
        }
        jitter *= 10.0;
        if jitter > 1e-2 * spec.sigma2 {
            return Err(Error::numerical("GP kernel is not positive definite even with jitter"));
        }
    };
    let z = DMatrix::from_fn(len, latent_dim, |_, _| standard_normal(rng));
    Ok(chol.l() * z)
}

pub fn lorenz_derivative(s: [f64; 3]) -> [f64; 3] {
    [
        LORENZ_SIGMA * (s[1] - s[0]),
        s[0] * (LORENZ_RHO - s[2]) - s[1],
        s[0] * s[1] - LORENZ_BETA * s[2],
    ]
}

fn rk4_step(s: [f64; 3], dt: f64) -> [f64; 3] {
    let add = |a: [f64; 3], b: [f64; 3], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]];
    let k1 = lorenz_derivative(s);
    let k2 = lorenz_derivative(add(s, k1, dt / 2.0));
    let k3 = lorenz_derivative(add(s, k2, dt / 2.0));
    let k4 = lorenz_derivative(add(s, k3, dt));
    [0, 1, 2].map(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Raw (unstandardized) fourth-order Runge–Kutta states, `steps` rows.
pub fn lorenz_integrate(steps: usize, dt: f64, x0: [f64; 3]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(steps, 3);
    let mut s = x0;
    for t in 0..steps {
        for i in 0..3 {
            out[(t, i)] = s[i];
        }
        s = rk4_step(s, dt);
    }
    out
}

/// Standardize each column to zero mean and unit variance (population).
pub fn standardize_columns(x: &mut DMatrix<f64>) {
    let len = x.nrows() as f64;
    for mut col in x.column_iter_mut() {
        let mean = col.sum() / len;
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / len).sqrt();
        if sd > 0.0 {
            col /= sd;
        }
    }
}

/// Lorenz trajectory after `burn_in` discarded steps, standardized per
/// dimension. Without `x0` the start is drawn from `N((1,1,28), I)`.
pub fn lorenz_trajectory(len: usize, dt: f64, burn_in: usize, x0: Option<[f64; 3]>, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lorenz_trajectory_with(len, dt, burn_in, x0, &mut rng)
}

pub fn lorenz_trajectory_with(
    len: usize,
    dt: f64,
    burn_in: usize,
    x0: Option<[f64; 3]>,
    rng: &mut impl Rng,
) -> Result<DMatrix<f64>> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::validation(format!("Lorenz step must be positive, got {dt}")));
    }
    let start = x0.unwrap_or_else(|| [1.0, 1.0, 28.0].map(|m| m + standard_normal(rng)));
    let mut s = start;
    for _ in 0..burn_in {
        s = rk4_step(s, dt);
    }
    let mut x = lorenz_integrate(len, dt, s);
    standardize_columns(&mut x);
    Ok(x)
}

/// Input `b_t` of the linear dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Drive {
    Constant(Vec<f64>),
    /// One row per transition.
    Series(Vec<Vec<f64>>),
}

impl Drive {
    fn at(&self, t: usize, dim: usize) -> Result<DVector<f64>> {
        let v = match self {
            Drive::Constant(b) => b,
            Drive::Series(rows) => rows
                .get(t)
                .ok_or_else(|| Error::validation(format!("LDS drive has no row for step {t}")))?,
        };
        if v.len() != dim {
            return Err(Error::validation(format!("LDS drive has length {}, expected {dim}", v.len())));
        }
        Ok(DVector::from_column_slice(v))
    }
}

/// `x_0 ~ N(mu0, q0)`, `x_{t+1} ~ N(A x_t + b_t, Q)`. Matrices are row-major
/// nested vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdsSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Drive,
    pub q: Vec<Vec<f64>>,
    pub mu0: Vec<f64>,
    pub q0: Vec<Vec<f64>>,
}

fn to_matrix(rows: &[Vec<f64>], what: &str, dim: usize) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::validation(format!("`{what}` must be {dim}x{dim}")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

/// Symmetric square root of a PSD matrix, or an error naming `what`.
pub fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    if (&sym - m).amax() > 1e-10 * m.amax().max(1.0) {
        return Err(Error::validation(format!("`{what}` is not symmetric")));
    }
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().any(|&e| e < -1e-10 * scale) {
        return Err(Error::validation(format!("`{what}` is not positive semidefinite")));
    }
    let root = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

impl LdsSpec {
    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    /// A slowly rotating, slightly damped 3-dimensional system.
    pub fn default_3d() -> LdsSpec {
        let theta: f64 = 0.02;
        let axis = [1.0 / 3f64.sqrt(); 3];
        let (s, c) = theta.sin_cos();
        let k = DMatrix::from_row_slice(3, 3, &[0.0, -axis[2], axis[1], axis[2], 0.0, -axis[0], -axis[1], axis[0], 0.0]);
        let rot = DMatrix::<f64>::identity(3, 3) + &k * s + &k * &k * (1.0 - c);
        let a = rot * 0.998;
        let rows = |m: &DMatrix<f64>| (0..3).map(|i| m.row(i).iter().copied().collect()).collect();
        let eye = |v: f64| (0..3).map(|i| (0..3).map(|j| if i == j { v } else { 0.0 }).collect()).collect();
        LdsSpec {
            a: rows(&a),
            b: Drive::Constant(vec![0.0; 3]),
            q: eye(2e-3),
            mu0: vec![0.0; 3],
            q0: eye(0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(Error::validation("LDS needs at least one dimension"));
        }
        to_matrix(&self.a, "a", d)?;
        psd_sqrt(&to_matrix(&self.q, "q", d)?, "q")?;
        psd_sqrt(&to_matrix(&self.q0, "q0", d)?, "q0")?;
        self.b.at(0, d).map(|_| ())
    }
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn lds_trajectory(spec: &LdsSpec, len: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lds_trajectory_with(spec, len, &mut rng)
}

pub fn lds_trajectory_with(spec: &LdsSpec, len: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>> {
    let d = spec.dim();
    if d == 0 {
        return Err(Error::validation("LDS needs at least one dimension"));
    }
    let a = to_matrix(&spec.a, "a", d)?;
    let q_root = psd_sqrt(&to_matrix(&spec.q, "q", d)?, "q")?;
    let q0_root = psd_sqrt(&to_matrix(&spec.q0, "q0", d)?, "q0")?;
    let radius = spectral_radius(&a);
    if radius > 1.0 {
        warn!("LDS transition has spectral radius {radius:.4} > 1");
    }
    let mut x = DMatrix::zeros(len, d);
    if len == 0 {
        return Ok(x);
    }
    let noise = |rng: &mut dyn rand::RngCore| DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let mut state = DVector::from_column_slice(&spec.mu0) + &q0_root * noise(rng);
    x.set_row(0, &state.transpose());
    for t in 1..len {
        state = &a * &state + spec.b.at(t - 1, d)? + &q_root * noise(rng);
        x.set_row(t, &state.transpose());
    }
    Ok(x)
}

/// Counts plus diagnostics from a spike generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeSample {
    /// `T×N`
    pub counts: DMatrix<f64>,
    /// Bins where the exponent hit the cap.
    pub clamped: usize,
    /// Bins with more than one spike.
    pub multi_spike_bins: usize,
}

/// `N×(1+p)` weights with the bias in column 0 and the filter reordered
/// oldest-lag first to match the history design.
pub fn beta_from_filter(bias: &DVector<f64>, filter: &[f64]) -> DMatrix<f64> {
    let p = filter.len();
    DMatrix::from_fn(bias.len(), 1 + p, |n, j| if j == 0 { bias[n] } else { filter[p - j] })
}

/// Sequential Poisson draws `y_{t,n} ~ Poisson(exp(α_n·x_t + b_n + Σ_k f_k y_{t−k,n}))`
/// with `filter[0]` the weight on the most recent bin.
pub fn generate_spikes_pp(
    x: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    bias: &DVector<f64>,
    filter: &[f64],
    seed: u64,
) -> Result<SpikeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_spikes_pp_with(x, alpha, bias, filter, &mut rng)
}

pub fn generate_spikes_pp_with(
    x: &DMatrix<f64>,
    alpha: &DMatrix<f64>,
    bias: &DVector<f64>,
    filter: &[f64],
    rng: &mut impl Rng,
) -> Result<SpikeSample> {
    if alpha.ncols() != x.ncols() || alpha.nrows() != bias.len() {
        return Err(Error::validation(format!(
            "latents are {}x{}, loadings {}x{}, bias {}",
            x.nrows(),
            x.ncols(),
            alpha.nrows(),
            alpha.ncols(),
            bias.len()
        )));
    }
    let (len, n_neurons) = (x.nrows(), alpha.nrows());
    let drive = x * alpha.transpose();
    let mut counts = DMatrix::zeros(len, n_neurons);
    let mut clamped = 0;
    let mut multi = 0;
    for t in 0..len {
        for n in 0..n_neurons {
            let mut e = drive[(t, n)] + bias[n];
            for (k, f) in filter.iter().enumerate() {
                if t > k {
                    e += f * counts[(t - 1 - k, n)];
                }
            }
            if e > DEFAULT_EXP_CAP {
                e = DEFAULT_EXP_CAP;
                clamped += 1;
            }
            let y = draw_poisson(e.exp(), rng);
            if y > 1.0 {
                multi += 1;
            }
            counts[(t, n)] = y;
        }
    }
    Ok(SpikeSample {
        counts,
        clamped,
        multi_spike_bins: multi,
    })
}

fn draw_poisson(rate: f64, rng: &mut impl Rng) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    Poisson::new(rate).map(|p| p.sample(rng)).unwrap_or(0.0)
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Independent draws `y_{t,n} ~ Poisson(softplus(c_n·x_t + d_n))`.
pub fn generate_spikes_lds_poisson(x: &DMatrix<f64>, c: &DMatrix<f64>, d: &DVector<f64>, seed: u64) -> Result<SpikeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_spikes_lds_poisson_with(x, c, d, &mut rng)
}

pub fn generate_spikes_lds_poisson_with(
    x: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DVector<f64>,
    rng: &mut impl Rng,
) -> Result<SpikeSample> {
    if c.ncols() != x.ncols() || c.nrows() != d.len() {
        return Err(Error::validation("observation matrix shape does not match latents or offsets"));
    }
    let eta = x * c.transpose();
    let mut multi = 0;
    let counts = DMatrix::from_fn(x.nrows(), c.nrows(), |t, n| {
        let y = draw_poisson(softplus(eta[(t, n)] + d[n]), rng);
        if y > 1.0 {
            multi += 1;
        }
        y
    });
    Ok(SpikeSample {
        counts,
        clamped: 0,
        multi_spike_bins: multi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentKind {
    Gp,
    Lorenz,
    Lds,
}

/// Per-neuron bias drawn from `N(mean, sd²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasRule {
    pub mean: f64,
    pub sd: f64,
}

fn default_n_neurons() -> usize {
    50
}
fn default_trial_len() -> usize {
    1000
}
fn default_trials() -> usize {
    10
}
fn default_bin_width() -> f64 {
    0.001
}
fn default_lorenz_dt() -> f64 {
    0.0015
}
fn default_burn_in() -> usize {
    500
}
fn default_loading_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    pub latent_kind: LatentKind,
    #[serde(default = "default_n_neurons")]
    pub n_neurons: usize,
    /// Ignored for Lorenz (always 3) and LDS (taken from `lds`).
    #[serde(default)]
    pub latent_dim: Option<usize>,
    #[serde(default = "default_trial_len")]
    pub trial_len: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bin_width")]
    pub bin_width: f64,
    #[serde(default)]
    pub kernel: Option<KernelSpec>,
    #[serde(default = "default_lorenz_dt")]
    pub lorenz_dt: f64,
    #[serde(default = "default_burn_in")]
    pub lorenz_burn_in: usize,
    #[serde(default)]
    pub lds: Option<LdsSpec>,
    /// Most recent lag first. Defaults to the suppressive filter for Lorenz
    /// data and to no history otherwise.
    #[serde(default)]
    pub history_filter: Option<Vec<f64>>,
    #[serde(default)]
    pub bias: Option<BiasRule>,
    /// Loadings are standard normal, normalized to unit max-norm per column,
    /// then multiplied by this.
    #[serde(default = "default_loading_scale")]
    pub loading_scale: f64,
}

impl SimSpec {
    pub fn new(latent_kind: LatentKind) -> SimSpec {
        SimSpec {
            latent_kind,
            n_neurons: default_n_neurons(),
            latent_dim: None,
            trial_len: default_trial_len(),
            trials: default_trials(),
            seed: 0,
            bin_width: default_bin_width(),
            kernel: None,
            lorenz_dt: default_lorenz_dt(),
            lorenz_burn_in: default_burn_in(),
            lds: None,
            history_filter: None,
            bias: None,
            loading_scale: default_loading_scale(),
        }
    }

    pub fn resolved_latent_dim(&self) -> usize {
        match self.latent_kind {
            LatentKind::Gp => self.latent_dim.unwrap_or(2),
            LatentKind::Lorenz => 3,
            LatentKind::Lds => self.lds().dim(),
        }
    }

    pub fn resolved_kernel(&self) -> KernelSpec {
        self.kernel.unwrap_or(KernelSpec {
            sigma2: 1.0,
            omega: 0.01,
            jitter: 0.0,
        })
    }

    pub fn lds(&self) -> LdsSpec {
        self.lds.clone().unwrap_or_else(LdsSpec::default_3d)
    }

    pub fn resolved_filter(&self) -> Vec<f64> {
        match (&self.history_filter, self.latent_kind) {
            (Some(f), _) => f.clone(),
            (None, LatentKind::Lorenz) => DEFAULT_HISTORY_FILTER.to_vec(),
            (None, _) => Vec::new(),
        }
    }

    pub fn resolved_bias(&self) -> BiasRule {
        self.bias.unwrap_or(match self.latent_kind {
            LatentKind::Gp => BiasRule { mean: 0.0, sd: 1.0 },
            LatentKind::Lorenz | LatentKind::Lds => BiasRule { mean: -3.5, sd: 0.3 },
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::validation(format!("config field `{field}`: {msg}")));
        if self.n_neurons == 0 {
            return bad("n_neurons", "must be at least 1".into());
        }
        if self.trial_len == 0 {
            return bad("trial_len", "must be at least 1".into());
        }
        if self.trials == 0 {
            return bad("trials", "must be at least 1".into());
        }
        if !(self.bin_width.is_finite() && self.bin_width > 0.0) {
            return bad("bin_width", format!("must be positive, got {}", self.bin_width));
        }
        if self.latent_dim == Some(0) {
            return bad("latent_dim", "must be at least 1".into());
        }
        match self.latent_kind {
            LatentKind::Gp => {
                let k = self.resolved_kernel();
                k.validate().map_err(|e| Error::validation(format!("config field `kernel`: {e}")))?;
            }
            LatentKind::Lorenz => {
                if !(self.lorenz_dt.is_finite() && self.lorenz_dt > 0.0) {
                    return bad("lorenz_dt", format!("must be positive, got {}", self.lorenz_dt));
                }
                if self.latent_dim.is_some_and(|l| l != 3) {
                    return bad("latent_dim", "Lorenz latents are 3-dimensional".into());
                }
            }
            LatentKind::Lds => {
                let lds = self.lds();
                lds.validate().map_err(|e| Error::validation(format!("config field `lds`: {e}")))?;
                if self.latent_dim.is_some_and(|l| l != lds.dim()) {
                    return bad("latent_dim", format!("LDS is {}-dimensional", lds.dim()));
                }
            }
        }
        let bias = self.resolved_bias();
        if !(bias.mean.is_finite() && bias.sd.is_finite() && bias.sd >= 0.0) {
            return bad("bias", "mean must be finite and sd non-negative".into());
        }
        if self.resolved_filter().iter().any(|f| !f.is_finite()) {
            return bad("history_filter", "entries must be finite".into());
        }
        if !self.loading_scale.is_finite() {
            return bad("loading_scale", "must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub spec: SimSpec,
    pub counts: Vec<DMatrix<f64>>,
    pub latents: Vec<DMatrix<f64>>,
    /// `N×L` loadings (the observation matrix `C` for LDS data).
    pub alpha: DMatrix<f64>,
    /// `N×(1+p)` bias and history weights, oldest lag first.
    pub beta: DMatrix<f64>,
    pub clamped: usize,
    pub multi_spike_bins: usize,
}

impl SimDataset {
    pub fn history_order(&self) -> usize {
        self.beta.ncols() - 1
    }
}

/// Standard normal loadings with unit max-norm columns.
pub fn draw_loadings(n_neurons: usize, latent_dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut alpha = DMatrix::from_fn(n_neurons, latent_dim, |_, _| standard_normal(rng));
    for mut col in alpha.column_iter_mut() {
        let s = col.amax();
        if s > 0.0 {
            col /= s;
        }
    }
    alpha
}

pub fn simulate(spec: &SimSpec) -> Result<SimDataset> {
    spec.validate()?;
    let dim = spec.resolved_latent_dim();
    let filter = spec.resolved_filter();
    let rule = spec.resolved_bias();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let alpha = draw_loadings(spec.n_neurons, dim, &mut rng) * spec.loading_scale;
    let noise = Normal::new(rule.mean, rule.sd).map_err(|e| Error::validation(format!("bias rule: {e}")))?;
    let bias = DVector::from_fn(spec.n_neurons, |_, _| noise.sample(&mut rng));
    let lds = spec.lds();
    let kernel = spec.resolved_kernel();

    let mut counts = Vec::with_capacity(spec.trials);
    let mut latents = Vec::with_capacity(spec.trials);
    let mut clamped = 0;
    let mut multi = 0;
    for k in 0..spec.trials {
        let mut trng = trial_rng(spec.seed, k);
        let x = match spec.latent_kind {
            LatentKind::Gp => sample_gp_latent_with(spec.trial_len, dim, &kernel, &mut trng)?,
            LatentKind::Lorenz => {
                lorenz_trajectory_with(spec.trial_len, spec.lorenz_dt, spec.lorenz_burn_in, None, &mut trng)?
            }
            LatentKind::Lds => lds_trajectory_with(&lds, spec.trial_len, &mut trng)?,
        };
        let sample = match spec.latent_kind {
            LatentKind::Lds => generate_spikes_lds_poisson_with(&x, &alpha, &bias, &mut trng)?,
            _ => generate_spikes_pp_with(&x, &alpha, &bias, &filter, &mut trng)?,
        };
        clamped += sample.clamped;
        multi += sample.multi_spike_bins;
        counts.push(sample.counts);
        latents.push(x);
    }
    if clamped > 0 {
        warn!("{clamped} bins hit the rate exponent cap during simulation");
    }
    let beta = match spec.latent_kind {
        LatentKind::Lds => beta_from_filter(&bias, &[]),
        _ => beta_from_filter(&bias, &filter),
    };
    Ok(SimDataset {
        spec: spec.clone(),
        counts,
        latents,
        alpha,
        beta,
        clamped,
        multi_spike_bins: multi,
    })
}
