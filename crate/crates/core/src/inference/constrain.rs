use crate::gp_prior::LatentPrior;
use crate::model::{LatentPosterior, ModelParams};

/// Which loading columns could not be normalized.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintFlags {
    pub zero_columns: Vec<usize>,
}

/// Zero-center every latent mean within each trial.
pub fn center_latents(posterior: &mut LatentPosterior) {
    for post in &mut posterior.trials {
        for mut col in post.mu.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
    }
}

/// Max-norm of each loading column.
pub fn loading_scales(params: &ModelParams) -> Vec<f64> {
    params.alpha.column_iter().map(|c| c.amax()).collect()
}

/// Removes the bias/mean and scale redundancies.
///
/// Each latent mean is centered per trial, and each loading column is divided
/// by its max-norm `s`. The rescale is compensated so the rates are unchanged:
/// `μ_l ← s μ_l`, `σ²_l ← s² σ²_l` (the factor `G_l ← s G_l`), `W_l ← W_l / s²`
/// and therefore `V_l ← s² V_l`. Under this reparametrization the bound is
/// invariant. Columns that are identically zero are left alone and flagged.
pub fn constrain(params: &mut ModelParams, posterior: &mut LatentPosterior, priors: &mut [LatentPrior]) -> ConstraintFlags {
    center_latents(posterior);
    let mut flags = ConstraintFlags::default();
    for (l, s) in loading_scales(params).into_iter().enumerate() {
        if !(s > 0.0) || !s.is_finite() {
            flags.zero_columns.push(l);
            continue;
        }
        if s == 1.0 {
            continue;
        }
        let mut col = params.alpha.column_mut(l);
        col /= s;
        let s2 = s * s;
        for post in &mut posterior.trials {
            let mut mu = post.mu.column_mut(l);
            mu *= s;
            let mut w = post.w.column_mut(l);
            w /= s2;
            let mut v = post.v.column_mut(l);
            v *= s2;
        }
        if let Some(prior) = priors.get_mut(l) {
            prior.rescale(s2);
        }
    }
    flags
}
