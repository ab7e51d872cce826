//! Focal, Dice, and Jaccard losses with analytic gradients.
//!
//! Each loss returns its scalar value together with the gradient with
//! respect to the probability input, so training code can splice it into a
//! tape via [`crate::tensor::Tape::scalar_with_grad`]. The same focal kernel
//! serves both tracks: pixelwise (mean over pixels) for segmentation and
//! per-example for classification.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

/// Probability clamp keeping `log` finite.
pub const PROB_EPS: f64 = 1e-7;

/// Focal loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    /// Class-balance weight on the positive class, in `(0, 1]`.
    pub alpha: f64,
    /// Focusing exponent, `>= 0`.
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidParameter(
                "focal alpha must be in (0, 1]".into(),
            ));
        }
        if self.gamma < 0.0 {
            return Err(Error::InvalidParameter("focal gamma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mixing weights for the combined segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboLossWeights {
    pub jaccard: f64,
    pub dice: f64,
    pub focal: f64,
}

impl Default for ComboLossWeights {
    fn default() -> Self {
        ComboLossWeights {
            jaccard: 1.0,
            dice: 1.0,
            focal: 1.0,
        }
    }
}

impl ComboLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.jaccard < 0.0 || self.dice < 0.0 || self.focal < 0.0 {
            return Err(Error::InvalidParameter(
                "combo loss weights must be >= 0".into(),
            ));
        }
        if self.jaccard == 0.0 && self.dice == 0.0 && self.focal == 0.0 {
            return Err(Error::InvalidParameter(
                "combo loss weights must not all be zero".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// A loss value and its gradient with respect to the probabilities.
pub struct Loss<T: Scalar> {
    pub value: T,
    pub grad: ArrayD<T>,
}

/// Combined segmentation loss with per-component values for logging.
pub struct ComboLoss<T: Scalar> {
    pub total: T,
    pub jaccard: T,
    pub dice: T,
    pub focal: T,
    pub grad: ArrayD<T>,
}

fn check_shapes<T: Scalar>(probs: &ArrayD<T>, targets: &ArrayD<T>) -> Result<()> {
    if probs.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            expected: probs.shape().to_vec(),
            got: targets.shape().to_vec(),
        });
    }
    Ok(())
}

/// `FL = -alpha_t (1 - p_t)^gamma ln(p_t)` with binary targets, where
/// `alpha_t` is `alpha` on positive elements and 1 on negative ones, so
/// `gamma = 0, alpha = 1` reduces to plain binary cross-entropy.
///
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`; the gradient is
/// zero where the clamp is active.
pub fn focal_loss<T: Scalar>(
    probs: &ArrayD<T>,
    targets: &ArrayD<T>,
    params: &FocalParams,
    reduction: Reduction,
) -> Result<Loss<T>> {
    check_shapes(probs, targets)?;
    params.validate()?;
    let eps = T::of_f64(PROB_EPS);
    let lo = eps;
    let hi = T::one() - eps;
    let alpha = T::of_f64(params.alpha);
    let gamma = T::of_f64(params.gamma);
    let gamma_zero = params.gamma == 0.0;

    let mut total = T::zero();
    let mut grad = ArrayD::<T>::zeros(probs.raw_dim());
    for ((&p, &y), g) in probs.iter().zip(targets.iter()).zip(grad.iter_mut()) {
        let clamped = p < lo || p > hi;
        let pc = p.max(lo).min(hi);
        let positive = y > T::half();
        let (pt, at, sign) = if positive {
            (pc, alpha, T::one())
        } else {
            (T::one() - pc, T::one(), -T::one())
        };
        let one_m = T::one() - pt;
        let pow = if gamma_zero { T::one() } else { one_m.powf(gamma) };
        total += -at * pow * pt.ln();
        if !clamped {
            let dpow = if gamma_zero {
                T::zero()
            } else {
                gamma * one_m.powf(gamma - T::one()) * pt.ln()
            };
            // d/dp_t of -at * (1-p_t)^gamma * ln(p_t)
            let dloss_dpt = at * (dpow - pow / pt);
            *g = dloss_dpt * sign;
        }
    }
    if reduction == Reduction::Mean {
        let n = T::of_usize(probs.len().max(1));
        total /= n;
        grad.mapv_inplace(|g| g / n);
    }
    Ok(Loss { value: total, grad })
}

/// Soft Dice loss `1 - (2*sum(p*t) + s) / (sum(p) + sum(t) + s)`.
///
/// A zero denominator (empty prediction and target with `s = 0`) counts as a
/// perfect match: loss 0, gradient 0.
pub fn dice_loss<T: Scalar>(
    probs: &ArrayD<T>,
    targets: &ArrayD<T>,
    smooth: f64,
) -> Result<Loss<T>> {
    check_shapes(probs, targets)?;
    let s = T::of_f64(smooth);
    let sum_pt: T = probs.iter().zip(targets.iter()).map(|(&p, &t)| p * t).sum();
    let sum_p: T = probs.iter().copied().sum();
    let sum_t: T = targets.iter().copied().sum();
    let den = sum_p + sum_t + s;
    if den == T::zero() {
        return Ok(Loss {
            value: T::zero(),
            grad: ArrayD::zeros(probs.raw_dim()),
        });
    }
    let num = T::of_f64(2.0) * sum_pt + s;
    let value = T::one() - num / den;
    // d/dp_i = -(2 t_i * den - num) / den^2
    let den2 = den * den;
    let grad = targets.mapv(|t| -(T::of_f64(2.0) * t * den - num) / den2);
    Ok(Loss { value, grad })
}

/// Soft Jaccard loss `1 - (sum(p*t) + s) / (sum(p) + sum(t) - sum(p*t) + s)`.
pub fn jaccard_loss<T: Scalar>(
    probs: &ArrayD<T>,
    targets: &ArrayD<T>,
    smooth: f64,
) -> Result<Loss<T>> {
    check_shapes(probs, targets)?;
    let s = T::of_f64(smooth);
    let sum_pt: T = probs.iter().zip(targets.iter()).map(|(&p, &t)| p * t).sum();
    let sum_p: T = probs.iter().copied().sum();
    let sum_t: T = targets.iter().copied().sum();
    let den = sum_p + sum_t - sum_pt + s;
    if den == T::zero() {
        return Ok(Loss {
            value: T::zero(),
            grad: ArrayD::zeros(probs.raw_dim()),
        });
    }
    let num = sum_pt + s;
    let value = T::one() - num / den;
    // d(num)/dp_i = t_i, d(den)/dp_i = 1 - t_i
    let den2 = den * den;
    let grad = targets.mapv(|t| -(t * den - num * (T::one() - t)) / den2);
    Ok(Loss { value, grad })
}

/// Weighted sum of Jaccard, Dice, and pixelwise focal (mean reduction).
pub fn combo_seg_loss<T: Scalar>(
    probs: &ArrayD<T>,
    targets: &ArrayD<T>,
    weights: &ComboLossWeights,
    focal: &FocalParams,
    smooth: f64,
) -> Result<ComboLoss<T>> {
    weights.validate()?;
    let j = jaccard_loss(probs, targets, smooth)?;
    let d = dice_loss(probs, targets, smooth)?;
    let f = focal_loss(probs, targets, focal, Reduction::Mean)?;
    let (wj, wd, wf) = (
        T::of_f64(weights.jaccard),
        T::of_f64(weights.dice),
        T::of_f64(weights.focal),
    );
    let total = wj * j.value + wd * d.value + wf * f.value;
    let mut grad = j.grad.mapv(|g| g * wj);
    grad.zip_mut_with(&d.grad, |acc, &g| *acc += wd * g);
    grad.zip_mut_with(&f.grad, |acc, &g| *acc += wf * g);
    Ok(ComboLoss {
        total,
        jaccard: j.value,
        dice: d.value,
        focal: f.value,
        grad,
    })
}
