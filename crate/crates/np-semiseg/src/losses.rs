//! Training loss: pixel-wise cross entropy plus the analytic KL between
//! the target- and context-conditioned latent Gaussians,
//! `total = l_c + lambda_kl * l_kl`.
//!
//! For diagonal Gaussians the KL has the closed form
//! `0.5 * [ sum ln(vc/vt) + sum vt/vc - D + (mc-mt)^T diag(1/vc) (mc-mt) ]`,
//! taken in the direction KL(target || context).

use crate::np_head::LatentDistribution;
use crate::tape::{Tape, Var};
use crate::tensor::{real, Real};
use crate::{NpError, Result};

/// Default KL coefficient.
pub const DEFAULT_LAMBDA_KL: f32 = 0.005;

/// Scalar components of one training step's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// mean cross entropy over supervised + pseudo-labelled pixels
    pub l_c: f32,
    /// mean KL over target images
    pub l_kl: f32,
    /// `l_c + lambda_kl * l_kl`
    pub total: f32,
    /// pixels the cross entropy averaged over
    pub pixel_count: usize,
}

/// Closed-form KL(target || context) between diagonal Gaussians given as
/// (mu, var) graph vars of equal dimension.
pub fn kl_gaussian_graph<T: Real>(
    tape: &Tape<T>,
    mu_target: Var,
    var_target: Var,
    mu_context: Var,
    var_context: Var,
) -> Result<Var> {
    let d = tape.shape(mu_target)[0];
    if tape.shape(var_target) != [d] || tape.shape(mu_context) != [d] || tape.shape(var_context) != [d]
    {
        return Err(NpError::Shape(
            "kl_gaussian: mu/var vectors must share one dimension".into(),
        ));
    }
    let log_ratio = {
        let r = tape.div(var_context, var_target)?;
        tape.ln(r)?
    };
    let var_ratio = tape.div(var_target, var_context)?;
    let diff = tape.sub(mu_context, mu_target)?;
    let maha = {
        let sq = tape.square(diff)?;
        tape.div(sq, var_context)?
    };
    let s_log = tape.sum_all(log_ratio)?;
    let s_ratio = tape.sum_all(var_ratio)?;
    let s_maha = tape.sum_all(maha)?;
    let half = real::<T>(0.5);
    let combined = tape.linear_combination(&[(half, s_log), (half, s_ratio), (half, s_maha)])?;
    tape.add_scalar(combined, real::<T>(-0.5 * d as f64))
}

/// Value-level KL(target || context); runs the same graph the trainer
/// differentiates through.
pub fn kl_gaussian(target: &LatentDistribution, context: &LatentDistribution) -> Result<f32> {
    target.validate()?;
    context.validate()?;
    if target.dim() != context.dim() {
        return Err(NpError::Shape(format!(
            "kl_gaussian dims {} vs {}",
            target.dim(),
            context.dim()
        )));
    }
    let tape: Tape<f32> = Tape::new();
    let mt = tape.leaf(crate::Tensor::from_vec(target.mu.clone()));
    let vt = tape.leaf(crate::Tensor::from_vec(target.var.clone()));
    let mc = tape.leaf(crate::Tensor::from_vec(context.mu.clone()));
    let vc = tape.leaf(crate::Tensor::from_vec(context.var.clone()));
    let kl = kl_gaussian_graph(&tape, mt, vt, mc, vc)?;
    let v = tape.value(kl).item()?;
    if !v.is_finite() {
        return Err(NpError::Numeric("non-finite KL".into()));
    }
    Ok(v)
}

/// Combine the step's cross entropy with the per-target-image KLs. The
/// KLs are averaged (not summed) so `lambda_kl` stays batch-size
/// independent; an empty list means no latent-path targets this step and
/// contributes zero.
pub fn total_loss(
    l_c: f32,
    per_target_kls: &[f32],
    lambda_kl: f32,
    pixel_count: usize,
) -> LossBreakdown {
    let l_kl = if per_target_kls.is_empty() {
        0.0
    } else {
        per_target_kls.iter().sum::<f32>() / per_target_kls.len() as f32
    };
    LossBreakdown {
        l_c,
        l_kl,
        total: l_c + lambda_kl * l_kl,
        pixel_count,
    }
}
