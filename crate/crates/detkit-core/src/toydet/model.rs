//! Parameters, forward pass, anchor assignment, and the exact gradient of
//! the total loss for the three-head linear detector.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::evalmap::GroundTruthObject;
use crate::geometry::{decode, encode, iou, iou_gradient, BBox, GeometryError};
use crate::losses::{
    focal_loss, focal_loss_grad, iou_bce_grad_wrt_target, iou_bce_loss, iou_l2_loss,
    iou_loss_grad_wrt_pred, smooth_l1_loss, smooth_l1_loss_grad, AnchorRecord, Assignment,
    IouLossKind, LossBatch, LossError,
};

use super::scene::{anchor_grid, ToyScene};
use super::train::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum ToyError {
    NoAnchors,
    /// The scene produced no positive anchors; the batch must be skipped.
    NoPositiveAnchors,
    /// Training hit a non-finite loss.
    Diverged { epoch: usize },
    InvalidConfig(&'static str),
    Loss(LossError),
    Geometry(GeometryError),
}

impl fmt::Display for ToyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToyError::NoAnchors => write!(f, "anchor grid is empty"),
            ToyError::NoPositiveAnchors => write!(f, "no positive anchors in batch"),
            ToyError::Diverged { epoch } => write!(f, "non-finite loss at epoch {epoch}"),
            ToyError::InvalidConfig(what) => write!(f, "invalid train config: {what}"),
            ToyError::Loss(e) => write!(f, "loss error: {e}"),
            ToyError::Geometry(e) => write!(f, "geometry error: {e}"),
        }
    }
}

impl core::error::Error for ToyError {}

impl From<LossError> for ToyError {
    fn from(e: LossError) -> Self {
        ToyError::Loss(e)
    }
}

impl From<GeometryError> for ToyError {
    fn from(e: GeometryError) -> Self {
        ToyError::Geometry(e)
    }
}

/// Shape manifest of the flat parameter vector.
///
/// Every anchor slot of a cell (sub-position x scale) owns its own rows,
/// the linear analogue of a convolutional head with `A * K` output
/// channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeadLayout {
    pub n_categories: usize,
    pub feature_dim: usize,
    pub anchor_slots: usize,
}

impl HeadLayout {
    /// Output rows per slot: C class logits, 4 offsets, 1 IoU logit.
    pub fn outputs_per_slot(&self) -> usize {
        self.n_categories + 5
    }

    /// Each output row owns `feature_dim` weights plus a bias.
    pub fn n_params(&self) -> usize {
        self.anchor_slots * self.outputs_per_slot() * (self.feature_dim + 1)
    }

    fn row(&self, slot: usize, output: usize) -> usize {
        (slot * self.outputs_per_slot() + output) * (self.feature_dim + 1)
    }
}

/// Flat parameter vector for the three heads plus a same-shape gradient
/// buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelParams {
    pub layout: HeadLayout,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
}

impl ToyModelParams {
    pub fn zeros(layout: HeadLayout) -> Self {
        let n = layout.n_params();
        Self { layout, values: vec![0.0; n], grads: vec![0.0; n] }
    }

    /// Rebuilds a parameter vector from a layout and stored values.
    pub fn from_values(layout: HeadLayout, values: Vec<f64>) -> Option<Self> {
        if values.len() != layout.n_params() {
            return None;
        }
        let n = values.len();
        Some(Self { layout, values, grads: vec![0.0; n] })
    }

    fn output(&self, slot: usize, output: usize, features: &[f64]) -> f64 {
        let row = self.layout.row(slot, output);
        let weights = &self.values[row..row + self.layout.feature_dim];
        let bias = self.values[row + self.layout.feature_dim];
        weights.iter().zip(features).map(|(w, f)| w * f).sum::<f64>() + bias
    }

    /// Accumulates `d_logit * features` into one output row of the
    /// gradient buffer.
    fn accumulate(&mut self, slot: usize, output: usize, features: &[f64], d_logit: f64) {
        let row = self.layout.row(slot, output);
        for (g, f) in self.grads[row..row + self.layout.feature_dim]
            .iter_mut()
            .zip(features)
        {
            *g += d_logit * f;
        }
        self.grads[row + self.layout.feature_dim] += d_logit;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Per-anchor model output.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPrediction {
    pub class_probs: Vec<f64>,
    pub offsets: [f64; 4],
    /// Sigmoid-squashed, always strictly inside (0, 1).
    pub pred_iou: f64,
}

/// Deterministic forward pass over every anchor of the scene. Output
/// order matches [`super::scene::anchor_grid`].
pub fn forward(
    params: &ToyModelParams,
    scene: &ToyScene,
    cfg: &TrainConfig,
) -> Vec<AnchorPrediction> {
    debug_assert_eq!(params.layout, cfg.layout(), "parameters do not match the config");
    let grid = scene.grid_size();
    let slots = params.layout.anchor_slots;
    let c = params.layout.n_categories;
    let mut out = Vec::with_capacity(grid * grid * slots);
    for cy in 0..grid {
        for cx in 0..grid {
            let features = scene.anchor_features(cx, cy);
            for slot in 0..slots {
                let class_probs = (0..c)
                    .map(|k| sigmoid(params.output(slot, k, &features)))
                    .collect();
                let offsets = core::array::from_fn(|m| params.output(slot, c + m, &features));
                let pred_iou = sigmoid(params.output(slot, c + 4, &features));
                out.push(AnchorPrediction { class_probs, offsets, pred_iou });
            }
        }
    }
    out
}

/// Assignment of one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorAssignment {
    pub assignment: Assignment,
    pub matched_gt: Option<usize>,
}

/// IoU-threshold assignment with forced best-anchor matches: an anchor is
/// positive when its best IoU reaches `pos_threshold` (matched to the
/// argmax ground truth), negative below `neg_threshold`, ignored between.
/// Additionally every ground truth claims its single highest-IoU anchor,
/// so a scene with objects always has positives.
pub fn assign(
    anchors: &[BBox],
    gts: &[GroundTruthObject],
    pos_threshold: f64,
    neg_threshold: f64,
) -> Result<Vec<AnchorAssignment>, ToyError> {
    if anchors.is_empty() {
        return Err(ToyError::NoAnchors);
    }
    let mut out: Vec<AnchorAssignment> = anchors
        .iter()
        .map(|a| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let ov = iou(a, &gt.bbox);
                if best.map_or(true, |(_, b)| ov > b) {
                    best = Some((g, ov));
                }
            }
            match best {
                Some((g, ov)) if ov >= pos_threshold => AnchorAssignment {
                    assignment: Assignment::Positive,
                    matched_gt: Some(g),
                },
                Some((_, ov)) if ov >= neg_threshold => AnchorAssignment {
                    assignment: Assignment::Ignore,
                    matched_gt: None,
                },
                _ => AnchorAssignment { assignment: Assignment::Negative, matched_gt: None },
            }
        })
        .collect();

    // Forced matches: (anchor, gt, iou) of each ground truth's best anchor;
    // on collision the higher IoU wins, ties to the lower ground-truth index.
    for (g, gt) in gts.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (a, anchor) in anchors.iter().enumerate() {
            let ov = iou(anchor, &gt.bbox);
            if best.map_or(true, |(_, b)| ov > b) {
                best = Some((a, ov));
            }
        }
        if let Some((a, ov)) = best {
            if ov > 0.0 {
                let replace = match out[a] {
                    AnchorAssignment { assignment: Assignment::Positive, matched_gt: Some(prev) } => {
                        ov > iou(&anchors[a], &gts[prev].bbox)
                    }
                    _ => true,
                };
                if replace {
                    out[a] = AnchorAssignment {
                        assignment: Assignment::Positive,
                        matched_gt: Some(g),
                    };
                }
            }
        }
    }
    Ok(out)
}

pub(super) struct BatchContext {
    pub anchors: Vec<BBox>,
    pub features: Vec<Vec<f64>>,
    pub assignments: Vec<AnchorAssignment>,
    pub batch: LossBatch,
}

/// Builds the loss batch for a scene. `frozen_target_ious`, when given,
/// replaces the live target IoUs; this is how the detached-target regime
/// is expressed as a function of the parameters.
pub(super) fn build_batch(
    params: &ToyModelParams,
    scene: &ToyScene,
    cfg: &TrainConfig,
    frozen_target_ious: Option<&[f64]>,
) -> Result<BatchContext, ToyError> {
    let grid = scene.grid_size();
    let anchors = anchor_grid(&cfg.scene, &cfg.anchor_scales, cfg.anchor_positions);
    let assignments = assign(&anchors, &scene.gts, cfg.pos_iou_threshold, cfg.neg_iou_threshold)?;
    let predictions = forward(params, scene, cfg);
    let slots = params.layout.anchor_slots;
    let c = params.layout.n_categories;
    debug_assert_eq!(anchors.len(), grid * grid * slots);

    let mut features = Vec::with_capacity(anchors.len());
    for cy in 0..grid {
        for cx in 0..grid {
            let f = scene.anchor_features(cx, cy);
            for _ in 0..slots {
                features.push(f.clone());
            }
        }
    }

    let mut records = Vec::with_capacity(anchors.len());
    for i in 0..anchors.len() {
        let pred = &predictions[i];
        let (class_targets, pred_offsets, target_offsets, target_iou) = match assignments[i] {
            AnchorAssignment { assignment: Assignment::Positive, matched_gt: Some(g) } => {
                let gt_box = scene.gts[g].bbox;
                let target_offsets = encode(&anchors[i], &gt_box)?;
                let decoded = decode(&anchors[i], &offsets_of(pred.offsets))?;
                let live_target = iou(&decoded, &gt_box);
                let target_iou = match frozen_target_ious {
                    Some(frozen) => frozen[i],
                    None => live_target,
                };
                let mut targets = vec![false; c];
                targets[scene.gts[g].category_id as usize] = true;
                (
                    targets,
                    pred.offsets,
                    [target_offsets.d_cx, target_offsets.d_cy, target_offsets.d_w, target_offsets.d_h],
                    target_iou,
                )
            }
            _ => (vec![false; c], pred.offsets, [0.0; 4], 0.0),
        };
        records.push(AnchorRecord {
            assignment: assignments[i].assignment,
            class_probs: pred.class_probs.clone(),
            class_targets,
            pred_offsets,
            target_offsets,
            pred_iou: pred.pred_iou,
            target_iou,
        });
    }

    Ok(BatchContext { anchors, features, assignments, batch: LossBatch { records } })
}

fn offsets_of(raw: [f64; 4]) -> crate::geometry::RegressionOffsets {
    crate::geometry::RegressionOffsets { d_cx: raw[0], d_cy: raw[1], d_w: raw[2], d_h: raw[3] }
}

/// The live target IoUs of a scene under the current parameters, indexed
/// by anchor; zero for non-positive anchors.
pub fn target_ious(
    params: &ToyModelParams,
    scene: &ToyScene,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, ToyError> {
    let ctx = build_batch(params, scene, cfg, None)?;
    Ok(ctx.batch.records.iter().map(|r| r.target_iou).collect())
}

/// Total loss of a scene. With `frozen_target_ious` the target IoUs are
/// held constant, which is the function the detached-target gradient
/// differentiates.
pub fn loss_value(
    params: &ToyModelParams,
    scene: &ToyScene,
    cfg: &TrainConfig,
    frozen_target_ious: Option<&[f64]>,
) -> Result<f64, ToyError> {
    let ctx = build_batch(params, scene, cfg, frozen_target_ious)?;
    batch_loss(&ctx.batch, cfg).map_err(Into::into)
}

fn batch_loss(batch: &LossBatch, cfg: &TrainConfig) -> Result<f64, LossError> {
    let cls = focal_loss(batch, &cfg.focal)?;
    let loc = smooth_l1_loss(batch, cfg.smooth_l1_beta)?;
    if !cfg.train_iou_head {
        return Ok(cls + loc);
    }
    let iou_loss = match cfg.iou_loss {
        IouLossKind::Bce => iou_bce_loss(batch)?,
        IouLossKind::L2 => iou_l2_loss(batch)?,
    };
    Ok(cls + loc + iou_loss)
}

/// Gradient of the IoU loss with respect to the target, for either loss
/// kind. The BCE branch is the closed form `log((1 - p) / p)`.
fn iou_loss_grad_wrt_target(kind: IouLossKind, pred: f64, target: f64) -> Result<f64, LossError> {
    match kind {
        IouLossKind::Bce => iou_bce_grad_wrt_target(pred),
        IouLossKind::L2 => Ok(2.0 * (target - pred)),
    }
}

/// Loss and exact parameter gradient for one scene. The gradient lands in
/// `params.grads`. Scenes with no positive anchors are a skip signal, not
/// a silent zero.
pub fn backward(
    params: &mut ToyModelParams,
    scene: &ToyScene,
    cfg: &TrainConfig,
) -> Result<f64, ToyError> {
    let ctx = build_batch(params, scene, cfg, None)?;
    let batch = &ctx.batch;
    if batch.n_pos() == 0 {
        return Err(ToyError::NoPositiveAnchors);
    }
    let n_pos = batch.n_pos() as f64;
    let loss = batch_loss(batch, cfg)?;

    let cls_grad = focal_loss_grad(batch, &cfg.focal)?;
    let loc_grad = smooth_l1_loss_grad(batch, cfg.smooth_l1_beta)?;
    let iou_grad_pred = if cfg.train_iou_head {
        Some(iou_loss_grad_wrt_pred(batch, cfg.iou_loss)?)
    } else {
        None
    };

    let c = params.layout.n_categories;
    let slots = params.layout.anchor_slots;
    params.grads.iter_mut().for_each(|g| *g = 0.0);

    for i in 0..ctx.anchors.len() {
        let slot = i % slots;
        let features = &ctx.features[i];
        let record = &batch.records[i];

        for k in 0..c {
            let p = record.class_probs[k];
            let d_logit = cls_grad[i][k] * p * (1.0 - p);
            if d_logit != 0.0 {
                params.accumulate(slot, k, features, d_logit);
            }
        }

        if record.assignment != Assignment::Positive {
            continue;
        }

        let mut d_offsets = loc_grad[i];
        if cfg.train_iou_head && cfg.propagate_target_iou_gradient {
            // Chain rule of Eq-path: d L_IoU / d target, through the
            // differentiable IoU of the decoded box, into the offsets.
            let g = ctx.assignments[i].matched_gt.expect("positive anchors carry a match");
            let gt_box = scene.gts[g].bbox;
            let anchor = ctx.anchors[i];
            let decoded = decode(&anchor, &offsets_of(record.pred_offsets))?;
            let box_grad = iou_gradient(&decoded, &gt_box);
            let w = iou_loss_grad_wrt_target(cfg.iou_loss, record.pred_iou, record.target_iou)?
                / n_pos;
            let dw = decoded.width();
            let dh = decoded.height();
            let d_target = [
                (box_grad[0] + box_grad[2]) * anchor.width(),
                (box_grad[1] + box_grad[3]) * anchor.height(),
                (-box_grad[0] + box_grad[2]) * 0.5 * dw,
                (-box_grad[1] + box_grad[3]) * 0.5 * dh,
            ];
            for m in 0..4 {
                d_offsets[m] += w * d_target[m];
            }
        }
        for m in 0..4 {
            if d_offsets[m] != 0.0 {
                params.accumulate(slot, c + m, features, d_offsets[m]);
            }
        }

        if let Some(iou_grad_pred) = &iou_grad_pred {
            let p = record.pred_iou;
            let d_logit = iou_grad_pred[i] * p * (1.0 - p);
            params.accumulate(slot, c + 4, features, d_logit);
        }
    }

    Ok(loss)
}
