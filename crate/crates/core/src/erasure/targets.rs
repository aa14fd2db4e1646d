//! Push–pull regression targets and the weighted two-branch loss.

use super::{ErasureError, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Push target: reflect the conditional reference across the unconditional
/// one, `ε_u − η·(ε_neg − ε_u)`. Pure tensor math — gradients never flow
/// through targets.
pub fn build_neg_target<T: Scalar>(
    eps_u: &Tensor<T>,
    eps_neg: &Tensor<T>,
    eta: f64,
) -> Result<Tensor<T>> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(ErasureError::Contract(format!("η must be positive, got {eta}")));
    }
    Ok(eps_u.add_scaled(&eps_neg.sub(eps_u)?, T::of(-eta))?)
}

/// Pull target: extrapolate the conditional reference away from the
/// unconditional one, `ε_pos + ω·(ε_pos − ε_u)`.
pub fn build_pos_target<T: Scalar>(
    eps_u: &Tensor<T>,
    eps_pos: &Tensor<T>,
    omega: f64,
) -> Result<Tensor<T>> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(ErasureError::Contract(format!("ω must be positive, got {omega}")));
    }
    Ok(eps_pos.add_scaled(&eps_pos.sub(eps_u)?, T::of(omega))?)
}

/// The scalars of one erasure step's loss.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    /// Differentiable total, `λ_neg·MSE_neg + λ_pos·MSE_pos`.
    pub total: Var,
    pub mse_neg: f64,
    pub mse_pos: f64,
}

/// Combines the two branch errors on the tape. Both MSEs are element means,
/// so the weights compare on the same footing regardless of image size.
pub fn bidirectional_loss<T: Scalar>(
    tape: &Tape<T>,
    pred_neg: Var,
    pred_pos: Var,
    target_neg: &Tensor<T>,
    target_pos: &Tensor<T>,
    lambda_neg: f64,
    lambda_pos: f64,
) -> Result<LossParts> {
    if lambda_neg < 0.0 || lambda_pos < 0.0 {
        return Err(ErasureError::Contract(format!(
            "loss weights must be non-negative, got ({lambda_neg}, {lambda_pos})"
        )));
    }
    let mse_neg = tape.mse(pred_neg, tape.leaf(target_neg))?;
    let mse_pos = tape.mse(pred_pos, tape.leaf(target_pos))?;
    let total = tape.add(
        tape.scale(mse_neg, T::of(lambda_neg)),
        tape.scale(mse_pos, T::of(lambda_pos)),
    )?;
    Ok(LossParts {
        total,
        mse_neg: tape.value(mse_neg).data()[0].as_f64(),
        mse_pos: tape.value(mse_pos).data()[0].as_f64(),
    })
}
