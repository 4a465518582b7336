//! Dice + focal segmentation loss.
//!
//! `L = L_dice + L_focal` with
//! `L_dice = 1 − (2Σpt + ε)/(Σp + Σt + ε)` and
//! `L_focal = mean[−α t (1−p)^γ log p − (1−α)(1−t) p^γ log(1−p)]`,
//! probabilities clamped to `[1e-7, 1 − 1e-7]` inside the focal term.

use crate::autodiff::{LossParams, PROB_CLAMP};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Loss of a single sample (all voxels of `prob` against `target`).
pub fn dice_focal_loss(prob: &Tensor, target: &Tensor, params: LossParams) -> Result<f64> {
    if prob.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prob {:?} vs target {:?}",
            prob.shape(),
            target.shape()
        )));
    }
    Ok(dice_focal_value(prob.data(), target.data(), params))
}

pub(crate) fn dice_focal_value(p: &[f32], t: &[f32], lp: LossParams) -> f64 {
    dice_term(p, t, lp.eps) + focal_term(p, t, lp)
}

pub(crate) fn dice_term(p: &[f32], t: &[f32], eps: f64) -> f64 {
    let (mut sp, mut st, mut spt) = (0.0f64, 0.0f64, 0.0f64);
    for (&pv, &tv) in p.iter().zip(t) {
        sp += pv as f64;
        st += tv as f64;
        spt += pv as f64 * tv as f64;
    }
    1.0 - (2.0 * spt + eps) / (sp + st + eps)
}

pub(crate) fn focal_term(p: &[f32], t: &[f32], lp: LossParams) -> f64 {
    let mut s = 0.0f64;
    for (&pv, &tv) in p.iter().zip(t) {
        let q = (pv as f64).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let t = tv as f64;
        s += -lp.alpha * t * (1.0 - q).powf(lp.gamma) * q.ln()
            - (1.0 - lp.alpha) * (1.0 - t) * q.powf(lp.gamma) * (1.0 - q).ln();
    }
    s / p.len() as f64
}

/// Write `upstream · ∂L/∂p` for one sample into `out`.
pub(crate) fn dice_focal_grad(p: &[f32], t: &[f32], lp: LossParams, upstream: f64, out: &mut [f32]) {
    let (mut sp, mut st, mut spt) = (0.0f64, 0.0f64, 0.0f64);
    for (&pv, &tv) in p.iter().zip(t) {
        sp += pv as f64;
        st += tv as f64;
        spt += pv as f64 * tv as f64;
    }
    let denom = sp + st + lp.eps;
    let num = 2.0 * spt + lp.eps;
    let n = p.len() as f64;
    let (a, g) = (lp.alpha, lp.gamma);
    for ((o, &pv), &tv) in out.iter_mut().zip(p).zip(t) {
        let t = tv as f64;
        let d_dice = -(2.0 * t * denom - num) / (denom * denom);
        let raw = pv as f64;
        let d_focal = if raw <= PROB_CLAMP || raw >= 1.0 - PROB_CLAMP {
            0.0
        } else {
            let q = raw;
            let pos = -a * t * (-g * (1.0 - q).powf(g - 1.0) * q.ln() + (1.0 - q).powf(g) / q);
            let neg = -(1.0 - a) * (1.0 - t) * (g * q.powf(g - 1.0) * (1.0 - q).ln() - q.powf(g) / (1.0 - q));
            (pos + neg) / n
        };
        *o = (upstream * (d_dice + d_focal)) as f32;
    }
}
