//! Segmentation losses with analytic gradients with respect to the predicted
//! probabilities, and the round-scheduled composite used in local training.
//!
//! Every loss returns its value together with `dLoss/dProb` laid out like the
//! [`ProbMap`] (pixel-major). Chain it through [`crate::model::backward`] to
//! reach the parameters.

use serde::{Deserialize, Serialize};

use crate::labels::{ClassSet, LabelMap};
use crate::model::ProbMap;

pub const BCE_CLAMP: f64 = 1e-7;
/// Lower clamp of the one-hot target inside the reverse cross entropy.
pub const RCE_TARGET_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl LossGrad {
    fn zeros(len: usize) -> Self {
        LossGrad {
            loss: 0.0,
            grad: vec![0.0; len],
        }
    }

    fn add_scaled(&mut self, other: &LossGrad, scale: f64) {
        self.loss += scale * other.loss;
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += scale * b;
        }
    }
}

/// `1 - smoothed soft Dice`, averaged over `active` classes.
pub fn dice_loss(pred: &ProbMap, target: &LabelMap, active: ClassSet) -> LossGrad {
    assert!(!active.is_empty(), "dice_loss needs at least one active class");
    let cn = pred.channels();
    let n_active = active.len() as f64;
    let mut out = LossGrad::zeros(pred.data().len());
    let labels = target.classes();

    for c in active.iter() {
        let ci = c as usize;
        let mut inter = 0.0;
        let mut sum_p = 0.0;
        let mut sum_t = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let p = pred.pixel(i)[ci];
            let t = if y == c { 1.0 } else { 0.0 };
            inter += p * t;
            sum_p += p;
            sum_t += t;
        }
        let num = 2.0 * inter + 1.0;
        let den = sum_p + sum_t + 1.0;
        out.loss += (1.0 - num / den) / n_active;
        let den2 = den * den;
        for (i, &y) in labels.iter().enumerate() {
            let t = if y == c { 1.0 } else { 0.0 };
            out.grad[i * cn + ci] = -(2.0 * t * den - num) / den2 / n_active;
        }
    }
    out
}

/// Per-channel binary cross entropy against the one-hot target, averaged over
/// pixels and `active` classes.
pub fn bce_loss(pred: &ProbMap, target: &LabelMap, active: ClassSet) -> LossGrad {
    assert!(!active.is_empty(), "bce_loss needs at least one active class");
    let cn = pred.channels();
    let labels = target.classes();
    let scale = 1.0 / (labels.len() as f64 * active.len() as f64);
    let mut out = LossGrad::zeros(pred.data().len());
    let (lo, hi) = (BCE_CLAMP, 1.0 - BCE_CLAMP);

    for (i, &y) in labels.iter().enumerate() {
        let px = pred.pixel(i);
        for c in active.iter() {
            let ci = c as usize;
            let raw = px[ci];
            let p = raw.clamp(lo, hi);
            let (term, d) = if y == c {
                (-p.ln(), -1.0 / p)
            } else {
                (-(1.0 - p).ln(), 1.0 / (1.0 - p))
            };
            out.loss += term * scale;
            if raw > lo && raw < hi {
                out.grad[i * cn + ci] = d * scale;
            }
        }
    }
    out
}

/// `e^{-20 (1 - r/R)}`: the round-dependent aRCE coefficient.
pub fn arce_schedule(round: usize, total_rounds: usize) -> f64 {
    let frac = if total_rounds == 0 {
        1.0
    } else {
        round as f64 / total_rounds as f64
    };
    (-20.0 * (1.0 - frac)).exp()
}

/// Reverse cross entropy `-sum_c q_c log p_c` with the one-hot target `p`
/// clamped below at [`RCE_TARGET_FLOOR`], pixel-averaged, scaled by
/// `coeff * arce_schedule(round, total_rounds)`.
pub fn arce_loss(
    pred: &ProbMap,
    target: &LabelMap,
    round: usize,
    total_rounds: usize,
    coeff: f64,
) -> LossGrad {
    let cn = pred.channels();
    let labels = target.classes();
    let scale = coeff * arce_schedule(round, total_rounds) / labels.len() as f64;
    let off_class = -RCE_TARGET_FLOOR.ln();
    let mut out = LossGrad::zeros(pred.data().len());
    for (i, &y) in labels.iter().enumerate() {
        let px = pred.pixel(i);
        for c in 0..cn {
            if c != y as usize {
                out.loss += scale * off_class * px[c];
                out.grad[i * cn + c] = scale * off_class;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossBranch {
    /// `r < r_warmup`: Dice + BCE.
    Warmup,
    /// `r_warmup <= r < r_WS`: `w(U) * (Dice + BCE)`.
    Weighted,
    /// `r >= r_WS`: Dice + BCE (+ aRCE once it has started).
    Robust,
}

/// The round boundaries and coefficients the composite loss depends on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSchedule {
    pub total_rounds: usize,
    pub warmup: usize,
    pub ws_end: usize,
    pub arce_start: usize,
    pub arce_coeff: f64,
    pub arce_enabled: bool,
}

impl LossSchedule {
    pub fn branch(&self, round: usize) -> LossBranch {
        if round < self.warmup {
            LossBranch::Warmup
        } else if round < self.ws_end {
            LossBranch::Weighted
        } else {
            LossBranch::Robust
        }
    }

    pub fn uses_rce(&self, round: usize) -> bool {
        self.arce_enabled && self.branch(round) == LossBranch::Robust && round >= self.arce_start
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub dice: f64,
    pub bce: f64,
    pub rce: Option<f64>,
    pub weight_applied: f64,
    pub branch: LossBranch,
}

/// Composite loss for one sample. `weight` is `w(U)` and only applies inside
/// the weighted window.
pub fn calculate_loss(
    pred: &ProbMap,
    target: &LabelMap,
    active: ClassSet,
    round: usize,
    schedule: &LossSchedule,
    weight: f64,
) -> (LossReport, Vec<f64>) {
    let branch = schedule.branch(round);
    let weight_applied = if branch == LossBranch::Weighted {
        weight
    } else {
        1.0
    };
    let dice = dice_loss(pred, target, active);
    let bce = bce_loss(pred, target, active);
    let mut acc = LossGrad::zeros(pred.data().len());
    acc.add_scaled(&dice, weight_applied);
    acc.add_scaled(&bce, weight_applied);
    let rce = if schedule.uses_rce(round) {
        let rce = arce_loss(
            pred,
            target,
            round,
            schedule.total_rounds,
            schedule.arce_coeff,
        );
        acc.add_scaled(&rce, 1.0);
        Some(rce.loss)
    } else {
        None
    };
    let report = LossReport {
        total: acc.loss,
        dice: dice.loss,
        bce: bce.loss,
        rce,
        weight_applied,
        branch,
    };
    (report, acc.grad)
}
