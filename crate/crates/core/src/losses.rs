//! Mask-side training objectives: per-pixel BCE, soft Dice, the
//! overlap-weighted refinement loss and their weighted sum.
//!
//! Predictions are probability maps. Every differentiable loss here runs on a
//! [`Tape`]; the `*_value` functions compute the same quantities on plain
//! slices for evaluation-time use (matching costs).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tape, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;
/// Additive smoothing in numerator and denominator of Dice.
pub const DICE_SMOOTH: f64 = 1.0;
/// Binarization threshold applied to probabilities.
pub const BINARY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of pixels claimed by two or more predicted masks.
    pub alpha: f64,
    pub lambda_ref: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 2.0,
            lambda_ref: 2.0,
            lambda_dice: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            errs.push(format!("loss.alpha must be >= 1, got {}", self.alpha));
        }
        if !(self.lambda_ref >= 0.0 && self.lambda_ref.is_finite()) {
            errs.push(format!("loss.lambda_ref must be >= 0, got {}", self.lambda_ref));
        }
        if !(self.lambda_dice >= 0.0 && self.lambda_dice.is_finite()) {
            errs.push(format!("loss.lambda_dice must be >= 0, got {}", self.lambda_dice));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

/// Per-pixel weights: `alpha` where at least two binarized predictions claim
/// the pixel, `1` elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapMap {
    pub height: usize,
    pub width: usize,
    pub alpha: f64,
    pub weights: Vec<f64>,
}

impl OverlapMap {
    pub fn overlap_pixels(&self) -> usize {
        self.weights.iter().filter(|&&w| w != 1.0).count()
    }
}

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, format!("prediction has {a} pixels, target {b}")));
    }
    Ok(())
}

/// `−[y·ln p + (1−y)·ln(1−p)]` elementwise, `p` clamped first.
pub fn bce_per_pixel<S: Scalar>(tape: &mut Tape<S>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim(
            "bce_per_pixel",
            format!("{:?} vs {:?}", tape.shape(pred), tape.shape(target)),
        ));
    }
    let p = tape.clamp(pred, S::lit(PROB_EPS), S::lit(1.0 - PROB_EPS))?;
    let log_p = tape.ln(p)?;
    let q = tape.one_minus(p)?;
    let log_q = tape.ln(q)?;
    let not_y = tape.one_minus(target)?;
    let pos = tape.mul(target, log_p)?;
    let neg = tape.mul(not_y, log_q)?;
    let both = tape.add(pos, neg)?;
    tape.scale(both, -S::one())
}

/// `1 − (2·Σp·y + s) / (Σp + Σy + s)` with smoothing `s = 1`.
pub fn dice_loss<S: Scalar>(tape: &mut Tape<S>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim(
            "dice_loss",
            format!("{:?} vs {:?}", tape.shape(pred), tape.shape(target)),
        ));
    }
    let smooth = S::lit(DICE_SMOOTH);
    let inter = tape.mul(pred, target)?;
    let inter = tape.sum(inter)?;
    let num = tape.scale(inter, S::lit(2.0))?;
    let num = tape.add_scalar(num, smooth)?;
    let sp = tape.sum(pred)?;
    let sy = tape.sum(target)?;
    let den = tape.add(sp, sy)?;
    let den = tape.add_scalar(den, smooth)?;
    let ratio = tape.div(num, den)?;
    tape.one_minus(ratio)
}

/// Builds the overlap weight map from (detached) probability maps.
pub fn refinement_weight_map<S: Scalar, M: AsRef<[S]>>(
    preds: &[M],
    height: usize,
    width: usize,
    alpha: f64,
) -> Result<OverlapMap> {
    if preds.is_empty() {
        return Err(Error::Contract("refinement weight map needs at least one mask".into()));
    }
    let n = height * width;
    let mut counts = vec![0u32; n];
    for p in preds {
        let p = p.as_ref();
        same_len("refinement_weight_map", p.len(), n)?;
        for (c, &v) in counts.iter_mut().zip(p) {
            if v.as_f64() > BINARY_THRESHOLD {
                *c += 1;
            }
        }
    }
    Ok(OverlapMap {
        height,
        width,
        alpha,
        weights: counts.into_iter().map(|c| if c >= 2 { alpha } else { 1.0 }).collect(),
    })
}

/// `(1/KHW) Σ_k Σ_i A_i · BCE(p_ki, y_ki)`; `A` is built from the current
/// prediction values and carries no gradient.
pub fn target_refinement_loss<S: Scalar>(
    tape: &mut Tape<S>,
    preds: &[Var],
    targets: &[Var],
    alpha: f64,
) -> Result<Var> {
    if preds.len() != targets.len() {
        return Err(Error::dim(
            "target_refinement_loss",
            format!("{} predictions vs {} targets", preds.len(), targets.len()),
        ));
    }
    let first = preds
        .first()
        .ok_or_else(|| Error::Contract("refinement loss needs at least one mask".into()))?;
    let shape = tape.shape(*first).to_vec();
    let [h, w] = shape[..] else {
        return Err(Error::dim(
            "target_refinement_loss",
            format!("masks must be (H, W), got {shape:?}"),
        ));
    };
    let values: Vec<Vec<S>> = preds.iter().map(|&p| tape.value(p).to_vec()).collect();
    let map = refinement_weight_map(&values, h, w, alpha)?;
    let weights = tape.constant(&[h, w], map.weights.iter().map(|&a| S::lit(a)).collect())?;
    let mut total: Option<Var> = None;
    for (&p, &y) in preds.iter().zip(targets) {
        let bce = bce_per_pixel(tape, p, y)?;
        let weighted = tape.mul(bce, weights)?;
        let s = tape.sum(weighted)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let norm = S::one() / S::lit((preds.len() * h * w) as f64);
    tape.scale(total.unwrap(), norm)
}

/// `λ_ref·L_ref + λ_dice·mean_k Dice_k`.
pub fn total_mask_loss<S: Scalar>(
    tape: &mut Tape<S>,
    preds: &[Var],
    targets: &[Var],
    weights: &LossWeights,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(2);
    if weights.lambda_ref != 0.0 {
        let r = target_refinement_loss(tape, preds, targets, weights.alpha)?;
        terms.push(tape.scale(r, S::lit(weights.lambda_ref))?);
    }
    if weights.lambda_dice != 0.0 {
        if preds.len() != targets.len() || preds.is_empty() {
            return Err(Error::dim(
                "total_mask_loss",
                format!("{} predictions vs {} targets", preds.len(), targets.len()),
            ));
        }
        let mut sum: Option<Var> = None;
        for (&p, &y) in preds.iter().zip(targets) {
            let d = dice_loss(tape, p, y)?;
            sum = Some(match sum {
                Some(s) => tape.add(s, d)?,
                None => d,
            });
        }
        let mean = tape.scale(sum.unwrap(), S::one() / S::lit(preds.len() as f64))?;
        terms.push(tape.scale(mean, S::lit(weights.lambda_dice))?);
    }
    match terms.as_slice() {
        [] => tape.constant(&[1], vec![S::zero()]),
        [one] => Ok(*one),
        [a, b] => tape.add(*a, *b),
        _ => unreachable!(),
    }
}

/// Per-pixel BCE on plain values.
pub fn bce_value(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean per-pixel BCE of `pred` (as probability) against `target`.
pub fn bce_mean_value(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len("bce_mean_value", pred.len(), target.len())?;
    let total: f64 = pred.iter().zip(target).map(|(&p, &y)| bce_value(p, y)).sum();
    Ok(total / pred.len() as f64)
}

pub fn dice_value(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len("dice_value", pred.len(), target.len())?;
    let inter: f64 = pred.iter().zip(target).map(|(p, y)| p * y).sum();
    let sp: f64 = pred.iter().sum();
    let sy: f64 = target.iter().sum();
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + sy + DICE_SMOOTH))
}
