//! Dice + cross-entropy task losses and their weighted joint combination.
//!
//! Logit buffers are two-channel and channel-major: `[background..., foreground...]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PredictionPair;
use crate::nn::Tensor;

/// Additive smoothing in the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Weights of the brain (`alpha`) and vessel (`beta`) terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || self.alpha + self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with positive sum, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::shape(expected, actual));
    }
    Ok(())
}

/// `log softmax` of the two classes at one voxel, returned as `(log p_bg, log p_fg)`.
fn log_softmax2(bg: f64, fg: f64) -> (f64, f64) {
    let m = bg.max(fg);
    let lse = m + ((bg - m).exp() + (fg - m).exp()).ln();
    (bg - lse, fg - lse)
}

/// Soft Dice loss on a foreground probability grid.
pub fn dice_loss(probs: &[f64], target: &[u8]) -> Result<f64> {
    check_len(target.len(), probs.len())?;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in probs.iter().zip(target) {
        let g = g as f64;
        inter += p * g;
        sp += p;
        sg += g;
    }
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (sp + sg + DICE_SMOOTH))
}

/// Mean voxelwise cross-entropy of two-class logits.
pub fn ce_loss(logits: &[f64], target: &[u8]) -> Result<f64> {
    check_len(2 * target.len(), logits.len())?;
    let n = target.len();
    let total: f64 = target
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let (lb, lf) = log_softmax2(logits[i], logits[n + i]);
            -(if t != 0 { lf } else { lb })
        })
        .sum();
    Ok(total / n as f64)
}

/// Foreground probabilities of two-class logits.
pub fn foreground_probs(logits: &[f64]) -> Vec<f64> {
    let n = logits.len() / 2;
    (0..n).map(|i| log_softmax2(logits[i], logits[n + i]).1.exp()).collect()
}

/// The per-task objective: Dice on the foreground softmax plus cross-entropy.
pub fn task_loss(logits: &[f64], target: &[u8]) -> Result<f64> {
    check_len(2 * target.len(), logits.len())?;
    Ok(dice_loss(&foreground_probs(logits), target)? + ce_loss(logits, target)?)
}

/// Both terms of one task loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTerms {
    pub dice: f64,
    pub ce: f64,
}

impl TaskTerms {
    pub fn total(&self) -> f64 {
        self.dice + self.ce
    }
}

/// Task loss and its analytic gradient with respect to the logits.
pub fn task_loss_with_grad(logits: &[f64], target: &[u8]) -> Result<(TaskTerms, Vec<f64>)> {
    check_len(2 * target.len(), logits.len())?;
    let n = target.len();
    let nf = n as f64;
    let mut probs = Vec::with_capacity(n);
    let mut ce = 0.0;
    for (i, &t) in target.iter().enumerate() {
        let (lb, lf) = log_softmax2(logits[i], logits[n + i]);
        ce -= if t != 0 { lf } else { lb };
        probs.push(lf.exp());
    }
    ce /= nf;

    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in probs.iter().zip(target) {
        let g = g as f64;
        inter += p * g;
        sp += p;
        sg += g;
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sp + sg + DICE_SMOOTH;
    let dice = 1.0 - num / den;

    let mut grad = vec![0.0; 2 * n];
    for (i, (&p, &g)) in probs.iter().zip(target).enumerate() {
        let g = g as f64;
        let d_dice_dp = -(2.0 * g * den - num) / (den * den);
        // d p / d fg-logit = p (1 - p); the background logit enters with opposite sign.
        let d_fg = d_dice_dp * p * (1.0 - p) + (p - g) / nf;
        grad[n + i] = d_fg;
        grad[i] = -d_fg;
    }
    Ok((TaskTerms { dice, ce }, grad))
}

/// Weighted joint objective with its per-task breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointLoss {
    pub total: f64,
    pub brain: Option<f64>,
    pub vessel: Option<f64>,
}

/// Joint loss, gradients with respect to the brain and vessel logits (when present).
pub struct JointGrad {
    pub loss: JointLoss,
    pub brain: Option<Vec<f64>>,
    pub vessel: Option<Vec<f64>>,
}

/// Loss and logit gradients for whichever heads are present. Absent heads contribute nothing.
pub fn heads_loss_with_grad(
    brain_logits: Option<&[f64]>,
    vessel_logits: Option<&[f64]>,
    brain_target: &[u8],
    vessel_target: &[u8],
    w: LossWeights,
) -> Result<JointGrad> {
    w.validate()?;
    let mut total = 0.0;
    let mut out = JointGrad {
        loss: JointLoss {
            total: 0.0,
            brain: None,
            vessel: None,
        },
        brain: None,
        vessel: None,
    };
    if let Some(l) = brain_logits {
        let (terms, mut g) = task_loss_with_grad(l, brain_target)?;
        g.iter_mut().for_each(|v| *v *= w.alpha);
        total += w.alpha * terms.total();
        out.loss.brain = Some(terms.total());
        out.brain = Some(g);
    }
    if let Some(l) = vessel_logits {
        let (terms, mut g) = task_loss_with_grad(l, vessel_target)?;
        g.iter_mut().for_each(|v| *v *= w.beta);
        total += w.beta * terms.total();
        out.loss.vessel = Some(terms.total());
        out.vessel = Some(g);
    }
    out.loss.total = total;
    Ok(out)
}

/// `alpha * L_brain + beta * L_vessel` for a joint-mode prediction.
pub fn joint_loss_with_grad(
    brain_logits: &[f64],
    vessel_logits: &[f64],
    brain_target: &[u8],
    vessel_target: &[u8],
    w: LossWeights,
) -> Result<JointGrad> {
    heads_loss_with_grad(Some(brain_logits), Some(vessel_logits), brain_target, vessel_target, w)
}

pub fn tensor_to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Joint loss of a [`PredictionPair`]; both heads must be present.
pub fn joint_loss(pred: &PredictionPair, brain_target: &[u8], vessel_target: &[u8], w: LossWeights) -> Result<JointLoss> {
    let (Some(b), Some(v)) = (&pred.brain_logits, &pred.vessel_logits) else {
        return Err(Error::Config("joint loss requires both brain and vessel heads".into()));
    };
    w.validate()?;
    let lb = task_loss(&tensor_to_f64(b), brain_target)?;
    let lv = task_loss(&tensor_to_f64(v), vessel_target)?;
    Ok(JointLoss {
        total: w.alpha * lb + w.beta * lv,
        brain: Some(lb),
        vessel: Some(lv),
    })
}
