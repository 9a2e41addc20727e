//! Soft Dice and focal losses, their combination, the analytic gradient,
//! and the IoU selection metric. Loss arithmetic runs in f64 so gradients
//! verify cleanly against finite differences.

use serde::{Deserialize, Serialize};

use crate::imagecore::BinaryMask;
use crate::{Error, Result};

/// Clamp bounds keeping `log(p_t)` finite.
pub const PROB_EPS: f64 = 1e-7;

/// Combination weights and focal parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    pub w_dice: f64,
    pub w_focal: f64,
    /// Focal balancing factor in (0, 1).
    pub alpha: f64,
    /// Focal focusing exponent, >= 0.
    pub gamma: f64,
    /// Dice smoothing constant.
    pub smooth: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            w_dice: 0.5,
            w_focal: 0.5,
            alpha: 0.25,
            gamma: 2.0,
            smooth: 1.0,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if (self.w_dice + self.w_focal - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam(format!(
                "loss weights sum to {} (expected 1)",
                self.w_dice + self.w_focal
            )));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 || self.alpha >= 1.0 {
            return Err(Error::InvalidParam("alpha must lie in (0, 1)".into()));
        }
        if self.gamma < 0.0 {
            return Err(Error::InvalidParam("gamma must be >= 0".into()));
        }
        if self.smooth.is_nan() || self.smooth <= 0.0 {
            return Err(Error::InvalidParam("smooth must be > 0".into()));
        }
        Ok(())
    }
}

fn check_lengths(pred: &[f64], truth: &BinaryMask) -> Result<()> {
    if pred.len() != truth.data().len() {
        return Err(Error::DimensionMismatch {
            expected_w: truth.width(),
            expected_h: truth.height(),
            got_w: pred.len(),
            got_h: 1,
        });
    }
    Ok(())
}

/// Soft Dice loss `1 - (2*sum(p*t) + smooth) / (sum(p) + sum(t) + smooth)`.
/// `smooth = 0` is accepted for hard-mask evaluation; the degenerate
/// both-empty case counts as perfect overlap.
pub fn dice_loss(pred: &[f64], truth: &BinaryMask, smooth: f64) -> Result<f64> {
    check_lengths(pred, truth)?;
    if smooth < 0.0 {
        return Err(Error::InvalidParam("smooth must be >= 0".into()));
    }
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (&p, &t) in pred.iter().zip(truth.data()) {
        inter += p * t as f64;
        psum += p;
        tsum += t as f64;
    }
    let denom = psum + tsum + smooth;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(1.0 - (2.0 * inter + smooth) / denom)
}

/// Mean focal term `alpha * (1 - p_t)^gamma * (-log p_t)` with
/// `p_t = pred` where truth is 1 and `1 - pred` elsewhere; predictions are
/// clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn focal_loss(pred: &[f64], truth: &BinaryMask, alpha: f64, gamma: f64) -> Result<f64> {
    check_lengths(pred, truth)?;
    let mut total = 0.0;
    for (&p, &t) in pred.iter().zip(truth.data()) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let pt = if t == 1 { p } else { 1.0 - p };
        total += alpha * (1.0 - pt).powf(gamma) * (-pt.ln());
    }
    Ok(total / pred.len() as f64)
}

/// Combined loss: `w_dice * dice + w_focal * focal`, nonnegative.
pub fn closs(pred: &[f64], truth: &BinaryMask, params: &LossParams) -> Result<f64> {
    params.validate()?;
    let d = dice_loss(pred, truth, params.smooth)?;
    let f = focal_loss(pred, truth, params.alpha, params.gamma)?;
    Ok(params.w_dice * d + params.w_focal * f)
}

/// Analytic per-pixel gradient of `closs` with respect to the predictions.
/// Pixels saturated by the probability clamp get zero gradient, matching the
/// piecewise-constant loss there.
pub fn closs_grad(pred: &[f64], truth: &BinaryMask, params: &LossParams) -> Result<Vec<f64>> {
    params.validate()?;
    check_lengths(pred, truth)?;
    let n = pred.len() as f64;

    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut tsum = 0.0;
    for (&p, &t) in pred.iter().zip(truth.data()) {
        inter += p * t as f64;
        psum += p;
        tsum += t as f64;
    }
    let denom = psum + tsum + params.smooth;
    let numer = 2.0 * inter + params.smooth;

    let (alpha, gamma) = (params.alpha, params.gamma);
    let grad = pred
        .iter()
        .zip(truth.data())
        .map(|(&p, &t)| {
            // Dice: d/dp_i [1 - numer/denom] = (numer - 2*t_i*denom)/denom^2.
            let ddice = (numer - 2.0 * t as f64 * denom) / (denom * denom);

            let dfocal = if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                let pt = if t == 1 { p } else { 1.0 - p };
                let one_m = 1.0 - pt;
                // d/dpt of alpha*(1-pt)^gamma*(-ln pt)
                let d_pt = if gamma == 0.0 {
                    -alpha / pt
                } else {
                    alpha * gamma * one_m.powf(gamma - 1.0) * pt.ln() - alpha * one_m.powf(gamma) / pt
                };
                let sign = if t == 1 { 1.0 } else { -1.0 };
                sign * d_pt / n
            } else {
                0.0
            };

            params.w_dice * ddice + params.w_focal * dfocal
        })
        .collect();
    Ok(grad)
}

/// Intersection over union of two masks; both-empty counts as 1.
pub fn iou(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    if !pred.same_dims(truth) {
        return Err(Error::DimensionMismatch {
            expected_w: truth.width(),
            expected_h: truth.height(),
            got_w: pred.width(),
            got_h: pred.height(),
        });
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        inter += (a == 1 && b == 1) as usize;
        union += (a == 1 || b == 1) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}
