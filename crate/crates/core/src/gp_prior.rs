//! Squared-exponential Gaussian-process prior over each latent dimension.
//!
//! Time is measured in integer bins, so `omega` is an inverse squared
//! timescale in bins⁻². The inference path never materializes the `T×T`
//! covariance; it works with a pivoted incomplete Cholesky factor `G`
//! (`K ≈ G Gᵀ`) whose columns are evaluated lazily from the kernel.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Jitter used whenever a dense kernel matrix has to be inverted,
/// relative to `sigma2`.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-7;

/// Default incomplete-Cholesky truncation tolerance per time bin, relative to `sigma2`.
pub const DEFAULT_RELATIVE_TOL: f64 = 1e-8;

/// Default upper bound on the factor rank.
pub const DEFAULT_MAX_RANK: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    /// Prior variance.
    pub sigma2: f64,
    /// Inverse squared timescale (per bin²).
    pub omega: f64,
    /// Added to the diagonal.
    #[serde(default)]
    pub jitter: f64,
}

impl KernelSpec {
    pub fn new(sigma2: f64, omega: f64) -> Result<Self> {
        let spec = KernelSpec {
            sigma2,
            omega,
            jitter: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(Error::validation(format!(
                "kernel sigma2 must be positive and finite, got {}",
                self.sigma2
            )));
        }
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return Err(Error::validation(format!(
                "kernel omega must be non-negative and finite, got {}",
                self.omega
            )));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::validation(format!(
                "kernel jitter must be non-negative, got {}",
                self.jitter
            )));
        }
        Ok(())
    }

    /// Copy of this spec with at least the default dense-inversion jitter.
    pub fn for_dense(&self) -> KernelSpec {
        KernelSpec {
            jitter: self.jitter.max(DEFAULT_RELATIVE_JITTER * self.sigma2),
            ..*self
        }
    }

    /// Same kernel with variance multiplied by `factor`; jitter follows.
    pub fn scaled(&self, factor: f64) -> KernelSpec {
        KernelSpec {
            sigma2: self.sigma2 * factor,
            omega: self.omega,
            jitter: self.jitter * factor,
        }
    }
}

/// Covariance between bins `t` and `s`.
pub fn sq_exp_cov(t: usize, s: usize, spec: &KernelSpec) -> f64 {
    let d = t.abs_diff(s) as f64;
    let k = spec.sigma2 * (-spec.omega * d * d).exp();
    if t == s {
        k + spec.jitter
    } else {
        k
    }
}

/// Dense `T×T` kernel matrix, jitter included on the diagonal.
pub fn dense_kernel(len: usize, spec: &KernelSpec) -> DMatrix<f64> {
    DMatrix::from_fn(len, len, |i, j| sq_exp_cov(i, j, spec))
}

/// Derivatives of the (jitter-free) kernel matrix with respect to
/// `log sigma2` and `log omega`.
pub fn kernel_log_grads(len: usize, spec: &KernelSpec) -> (DMatrix<f64>, DMatrix<f64>) {
    let plain = KernelSpec {
        jitter: 0.0,
        ..*spec
    };
    let d_log_sigma2 = dense_kernel(len, &plain);
    let d_log_omega = DMatrix::from_fn(len, len, |i, j| {
        let d = i.abs_diff(j) as f64;
        -spec.omega * d * d * d_log_sigma2[(i, j)]
    });
    (d_log_sigma2, d_log_omega)
}

/// Truncated pivoted incomplete Cholesky factor `K ≈ G Gᵀ`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    g: DMatrix<f64>,
    pivots: Vec<usize>,
    residual_trace: f64,
    // thin QR of G, for least-squares coefficients and projections
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl CholFactor {
    fn from_columns(g: DMatrix<f64>, pivots: Vec<usize>, residual_trace: f64) -> Result<Self> {
        let qr = g.clone().qr();
        let q = qr.q();
        let r = qr.r();
        if (0..r.nrows()).any(|i| r[(i, i)] == 0.0) {
            return Err(Error::numerical("incomplete Cholesky factor has dependent columns"));
        }
        Ok(CholFactor {
            g,
            pivots,
            residual_trace,
            q,
            r,
        })
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn rank(&self) -> usize {
        self.g.ncols()
    }

    pub fn len(&self) -> usize {
        self.g.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.g.nrows() == 0
    }

    pub fn pivots(&self) -> &[usize] {
        &self.pivots
    }

    /// Trace of `K − G Gᵀ` at truncation.
    pub fn residual_trace(&self) -> f64 {
        self.residual_trace
    }

    /// Least-squares coefficients `c` minimizing `‖x − G c‖`.
    pub fn coefficients(&self, x: &DVector<f64>) -> DVector<f64> {
        let qtx = self.q.tr_mul(x);
        self.r
            .solve_upper_triangular(&qtx)
            .expect("factor R has a non-zero diagonal by construction")
    }

    /// Orthogonal projection of `x` onto the column span of `G`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * self.q.tr_mul(x)
    }

    /// `xᵀ (G Gᵀ)⁺ x` for `x` in the span of `G`: the squared norm of its
    /// coefficient vector.
    pub fn quad_form_inv(&self, x: &DVector<f64>) -> f64 {
        self.coefficients(x).norm_squared()
    }

    /// `(G Gᵀ)⁺ x`, half the gradient of [`quad_form_inv`](Self::quad_form_inv).
    pub fn pinv_mul(&self, x: &DVector<f64>) -> DVector<f64> {
        let c = self.coefficients(x);
        let back = self
            .r
            .tr_solve_upper_triangular(&c)
            .expect("factor R has a non-zero diagonal by construction");
        &self.q * back
    }

    /// The factor of `factor · K`.
    pub fn scaled(&self, factor: f64) -> CholFactor {
        let s = factor.sqrt();
        CholFactor {
            g: &self.g * s,
            pivots: self.pivots.clone(),
            residual_trace: self.residual_trace * factor,
            q: self.q.clone(),
            r: &self.r * s,
        }
    }

    /// Dense `G Gᵀ`; for tests and small diagnostics.
    pub fn to_dense(&self) -> DMatrix<f64> {
        &self.g * self.g.transpose()
    }
}

/// Greedy diagonal-pivoted incomplete Cholesky of the kernel matrix on `len`
/// bins. Columns are evaluated lazily; the full matrix is never formed.
///
/// Stops at the smallest rank whose residual trace is `<= tol`, or at `max_rank`.
pub fn incomplete_cholesky(len: usize, spec: &KernelSpec, tol: f64, max_rank: usize) -> Result<CholFactor> {
    spec.validate()?;
    if len == 0 {
        return Err(Error::validation("incomplete Cholesky needs at least one time bin"));
    }
    if !(tol > 0.0) {
        return Err(Error::validation(format!("truncation tolerance must be positive, got {tol}")));
    }
    if max_rank == 0 || max_rank > len {
        return Err(Error::validation(format!(
            "max_rank must lie in [1, {len}], got {max_rank}"
        )));
    }

    let mut diag = vec![spec.sigma2 + spec.jitter; len];
    let mut chosen = vec![false; len];
    let mut pivots = Vec::with_capacity(max_rank);
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(max_rank);
    let floor = -(spec.jitter + 1e-12 * spec.sigma2);

    let residual = |diag: &[f64], chosen: &[bool]| -> f64 {
        diag.iter()
            .zip(chosen)
            .filter(|(_, &c)| !c)
            .map(|(d, _)| d.max(0.0))
            .sum()
    };

    while pivots.len() < max_rank {
        if !pivots.is_empty() && residual(&diag, &chosen) <= tol {
            break;
        }
        // largest remaining diagonal, lowest index on ties
        let mut piv = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for (i, &d) in diag.iter().enumerate() {
            if chosen[i] {
                continue;
            }
            if d < floor {
                return Err(Error::numerical(format!(
                    "kernel is indefinite: residual diagonal {d:e} at bin {i}"
                )));
            }
            if d > best {
                best = d;
                piv = i;
            }
        }
        if piv == usize::MAX || best <= 0.0 {
            break;
        }

        let root = best.sqrt();
        let mut col = vec![0.0; len];
        for i in 0..len {
            if chosen[i] {
                continue;
            }
            if i == piv {
                col[i] = root;
                continue;
            }
            let mut v = sq_exp_cov(i, piv, spec);
            for prev in &columns {
                v -= prev[i] * prev[piv];
            }
            col[i] = v / root;
        }
        for i in 0..len {
            if !chosen[i] {
                diag[i] -= col[i] * col[i];
            }
        }
        chosen[piv] = true;
        diag[piv] = 0.0;
        pivots.push(piv);
        columns.push(col);
    }

    let rank = columns.len();
    let g = DMatrix::from_fn(len, rank, |i, j| columns[j][i]);
    let residual_trace = residual(&diag, &chosen);
    CholFactor::from_columns(g, pivots, residual_trace)
}

/// Prior over one latent dimension: kernel hyperparameters plus factors for
/// each trial length in use.
#[derive(Debug, Clone)]
pub struct LatentPrior {
    spec: KernelSpec,
    tol_per_bin: f64,
    max_rank: usize,
    factors: BTreeMap<usize, CholFactor>,
}

impl LatentPrior {
    /// `tol_per_bin` is relative to `sigma2`: the truncation tolerance for a
    /// trial of length `T` is `tol_per_bin · T · sigma2`.
    pub fn new(spec: KernelSpec, tol_per_bin: f64, max_rank: usize, lengths: &[usize]) -> Result<Self> {
        let mut prior = LatentPrior {
            spec,
            tol_per_bin,
            max_rank,
            factors: BTreeMap::new(),
        };
        prior.rebuild(spec, lengths)?;
        Ok(prior)
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn max_rank(&self) -> usize {
        self.max_rank
    }

    pub fn tol_per_bin(&self) -> f64 {
        self.tol_per_bin
    }

    pub fn factor(&self, len: usize) -> &CholFactor {
        self.factors
            .get(&len)
            .unwrap_or_else(|| panic!("no prior factor for trial length {len}"))
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.factors.keys().copied()
    }

    /// Recompute every factor for a new kernel.
    pub fn rebuild(&mut self, spec: KernelSpec, lengths: &[usize]) -> Result<()> {
        spec.validate()?;
        let mut factors = BTreeMap::new();
        for &len in lengths {
            if factors.contains_key(&len) {
                continue;
            }
            let tol = self.tol_per_bin * len as f64 * spec.sigma2;
            let rank = self.max_rank.min(len).max(1);
            factors.insert(len, incomplete_cholesky(len, &spec, tol, rank)?);
        }
        self.spec = spec;
        self.factors = factors;
        Ok(())
    }

    /// Multiply the prior variance by `factor`. Factors are rescaled exactly
    /// rather than recomputed.
    pub fn rescale(&mut self, factor: f64) {
        self.spec = self.spec.scaled(factor);
        for f in self.factors.values_mut() {
            *f = f.scaled(factor);
        }
    }
}
