//! Training losses: focal classification loss, smooth-L1 regression loss,
//! and the IoU prediction loss (BCE with a soft target, or L2), plus their
//! analytic gradients.
//!
//! The gradient of the BCE IoU loss with respect to the *target* IoU,
//! `log((1 - IoU_i) / IoU_i)`, is the term that lets the IoU prediction
//! head steer the regression head when target-IoU gradient propagation is
//! enabled.

use alloc::vec::Vec;
use core::fmt;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before any logarithm.
pub const PROB_EPS: f64 = 1e-6;

/// Focal loss parameters. `balance` weights the positive-class term and
/// `1 - balance` the negative term; it is unrelated to the fusion exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FocalParams {
    pub gamma: f64,
    pub balance: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, balance: 0.25 }
    }
}

/// Which loss trains the IoU prediction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum IouLossKind {
    Bce,
    L2,
}

/// Anchor assignment produced by the matching step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Positive,
    Negative,
    Ignore,
}

/// One anchor's predictions and targets.
///
/// `class_probs` are per-category probabilities after the squashing
/// nonlinearity; `class_targets` the one-vs-all targets. Offsets and IoU
/// fields are only meaningful for positive anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorRecord {
    pub assignment: Assignment,
    pub class_probs: Vec<f64>,
    pub class_targets: Vec<bool>,
    pub pred_offsets: [f64; 4],
    pub target_offsets: [f64; 4],
    pub pred_iou: f64,
    pub target_iou: f64,
}

impl AnchorRecord {
    pub fn negative(class_probs: Vec<f64>) -> Self {
        let n = class_probs.len();
        Self {
            assignment: Assignment::Negative,
            class_probs,
            class_targets: alloc::vec![false; n],
            pred_offsets: [0.0; 4],
            target_offsets: [0.0; 4],
            pred_iou: 0.5,
            target_iou: 0.0,
        }
    }
}

/// A batch of per-anchor records. The positive count is derived from the
/// assignments, so it can never disagree with the flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBatch {
    pub records: Vec<AnchorRecord>,
}

impl LossBatch {
    pub fn n_pos(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.assignment == Assignment::Positive)
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LossError {
    /// A loss normalized by the positive count was evaluated on a batch
    /// with no positive anchors.
    NoPositives,
    /// smooth-L1 transition point must be strictly positive.
    NonPositiveBeta,
    /// The Eq. 3-2 gradient needs a predicted IoU strictly inside (0, 1).
    IouNotInOpenUnitInterval,
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::NoPositives => write!(f, "batch has no positive anchors"),
            LossError::NonPositiveBeta => write!(f, "smooth-L1 beta must be > 0"),
            LossError::IouNotInOpenUnitInterval => {
                write!(f, "predicted IoU must lie strictly inside (0, 1)")
            }
        }
    }
}

impl core::error::Error for LossError {}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Fixed-order pairwise reduction. Bit-stable for a given record order no
/// matter how the evaluation is chunked across workers.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

/// Focal term for a single (anchor, category) pair.
pub fn focal_term(p: f64, target: bool, params: &FocalParams) -> f64 {
    let p = clamp_prob(p);
    if target {
        params.balance * libm::pow(1.0 - p, params.gamma) * (-libm::log(p))
    } else {
        (1.0 - params.balance) * libm::pow(p, params.gamma) * (-libm::log(1.0 - p))
    }
}

/// Derivative of [`focal_term`] with respect to the probability.
pub fn focal_term_grad(p: f64, target: bool, params: &FocalParams) -> f64 {
    let p = clamp_prob(p);
    let g = params.gamma;
    if target {
        let pow_term = if g == 0.0 { 0.0 } else { g * libm::pow(1.0 - p, g - 1.0) * libm::log(p) };
        params.balance * (pow_term - libm::pow(1.0 - p, g) / p)
    } else {
        let pow_term = if g == 0.0 { 0.0 } else { -g * libm::pow(p, g - 1.0) * libm::log(1.0 - p) };
        (1.0 - params.balance) * (pow_term + libm::pow(p, g) / (1.0 - p))
    }
}

/// Huber-style smooth-L1 of a scalar residual with transition point `beta`.
pub fn smooth_l1_term(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

/// Derivative of [`smooth_l1_term`] in the residual.
pub fn smooth_l1_term_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Binary cross-entropy with a soft (real-valued) target.
pub fn bce(pred: f64, target: f64) -> f64 {
    let p = clamp_prob(pred);
    -(target * libm::log(p) + (1.0 - target) * libm::log(1.0 - p))
}

/// Derivative of [`bce`] with respect to the prediction.
pub fn bce_grad_wrt_pred(pred: f64, target: f64) -> f64 {
    let p = clamp_prob(pred);
    (p - target) / (p * (1.0 - p))
}

/// Gradient of `BCE(IoU_i, t)` with respect to the target `t`:
/// `log((1 - IoU_i) / IoU_i)`. Zero at `IoU_i = 0.5`, negative above,
/// positive below, and strictly decreasing.
pub fn iou_bce_grad_wrt_target(pred_iou: f64) -> Result<f64, LossError> {
    if !(pred_iou > 0.0 && pred_iou < 1.0) {
        return Err(LossError::IouNotInOpenUnitInterval);
    }
    Ok(libm::log((1.0 - pred_iou) / pred_iou))
}

fn require_positives(batch: &LossBatch) -> Result<f64, LossError> {
    let n = batch.n_pos();
    if n == 0 {
        Err(LossError::NoPositives)
    } else {
        Ok(n as f64)
    }
}

/// Focal classification loss over positive and negative anchors,
/// normalized by the positive count. Ignore anchors contribute nothing.
pub fn focal_loss(batch: &LossBatch, params: &FocalParams) -> Result<f64, LossError> {
    let n_pos = require_positives(batch)?;
    let terms: Vec<f64> = batch
        .records
        .iter()
        .filter(|r| r.assignment != Assignment::Ignore)
        .map(|r| {
            let per_class: Vec<f64> = r
                .class_probs
                .iter()
                .zip(&r.class_targets)
                .map(|(&p, &t)| focal_term(p, t, params))
                .collect();
            pairwise_sum(&per_class)
        })
        .collect();
    Ok(pairwise_sum(&terms) / n_pos)
}

/// Gradient of [`focal_loss`] with respect to every class probability.
/// Returns one vector per record, aligned with `class_probs`; ignore
/// anchors get zeros.
pub fn focal_loss_grad(batch: &LossBatch, params: &FocalParams) -> Result<Vec<Vec<f64>>, LossError> {
    let n_pos = require_positives(batch)?;
    Ok(batch
        .records
        .iter()
        .map(|r| {
            if r.assignment == Assignment::Ignore {
                return alloc::vec![0.0; r.class_probs.len()];
            }
            r.class_probs
                .iter()
                .zip(&r.class_targets)
                .map(|(&p, &t)| focal_term_grad(p, t, params) / n_pos)
                .collect()
        })
        .collect())
}

/// Smooth-L1 regression loss summed over the four offsets of each positive
/// anchor, normalized by the positive count.
pub fn smooth_l1_loss(batch: &LossBatch, beta: f64) -> Result<f64, LossError> {
    if beta <= 0.0 {
        return Err(LossError::NonPositiveBeta);
    }
    let n_pos = require_positives(batch)?;
    let terms: Vec<f64> = batch
        .records
        .iter()
        .filter(|r| r.assignment == Assignment::Positive)
        .map(|r| {
            (0..4)
                .map(|m| smooth_l1_term(r.pred_offsets[m] - r.target_offsets[m], beta))
                .sum()
        })
        .collect();
    Ok(pairwise_sum(&terms) / n_pos)
}

/// Gradient of [`smooth_l1_loss`] with respect to the predicted offsets.
pub fn smooth_l1_loss_grad(batch: &LossBatch, beta: f64) -> Result<Vec<[f64; 4]>, LossError> {
    if beta <= 0.0 {
        return Err(LossError::NonPositiveBeta);
    }
    let n_pos = require_positives(batch)?;
    Ok(batch
        .records
        .iter()
        .map(|r| {
            let mut g = [0.0; 4];
            if r.assignment == Assignment::Positive {
                for m in 0..4 {
                    g[m] = smooth_l1_term_grad(r.pred_offsets[m] - r.target_offsets[m], beta) / n_pos;
                }
            }
            g
        })
        .collect())
}

/// BCE IoU prediction loss over positive anchors only, with the soft
/// target IoU.
pub fn iou_bce_loss(batch: &LossBatch) -> Result<f64, LossError> {
    let n_pos = require_positives(batch)?;
    let terms: Vec<f64> = batch
        .records
        .iter()
        .filter(|r| r.assignment == Assignment::Positive)
        .map(|r| bce(r.pred_iou, r.target_iou))
        .collect();
    Ok(pairwise_sum(&terms) / n_pos)
}

/// L2 IoU prediction loss over positive anchors only.
pub fn iou_l2_loss(batch: &LossBatch) -> Result<f64, LossError> {
    let n_pos = require_positives(batch)?;
    let terms: Vec<f64> = batch
        .records
        .iter()
        .filter(|r| r.assignment == Assignment::Positive)
        .map(|r| (r.pred_iou - r.target_iou) * (r.pred_iou - r.target_iou))
        .collect();
    Ok(pairwise_sum(&terms) / n_pos)
}

/// Gradient of the selected IoU loss with respect to each record's
/// predicted IoU; zero for non-positive anchors.
pub fn iou_loss_grad_wrt_pred(batch: &LossBatch, kind: IouLossKind) -> Result<Vec<f64>, LossError> {
    let n_pos = require_positives(batch)?;
    Ok(batch
        .records
        .iter()
        .map(|r| {
            if r.assignment != Assignment::Positive {
                return 0.0;
            }
            match kind {
                IouLossKind::Bce => bce_grad_wrt_pred(r.pred_iou, r.target_iou) / n_pos,
                IouLossKind::L2 => 2.0 * (r.pred_iou - r.target_iou) / n_pos,
            }
        })
        .collect())
}

/// Unweighted sum of the classification, regression, and IoU losses.
pub fn total_loss(
    batch: &LossBatch,
    focal_params: &FocalParams,
    beta: f64,
    iou_loss_kind: IouLossKind,
) -> Result<f64, LossError> {
    let cls = focal_loss(batch, focal_params)?;
    let loc = smooth_l1_loss(batch, beta)?;
    let iou = match iou_loss_kind {
        IouLossKind::Bce => iou_bce_loss(batch)?,
        IouLossKind::L2 => iou_l2_loss(batch)?,
    };
    Ok(cls + loc + iou)
}
