//! IoU-aware detection confidence: `S_det = p^alpha * IoU^(1-alpha)`.
//!
//! The fused confidence re-ranks detections before NMS and AP evaluation.
//! `alpha = 1` degenerates to score-only ranking; `alpha = 0` ranks on the
//! IoU alone.

use alloc::vec::Vec;
use core::fmt;

use crate::evalmap::Detection;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Which IoU feeds the fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FusionMode {
    /// Rank on the classification score alone.
    ScoreOnly,
    /// Fuse the score with the model's predicted IoU.
    FusedPredictedIou,
    /// Fuse the score with the ground-truth IoU (upper-bound analysis).
    FusedGroundTruthIou,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct FusionConfig {
    pub alpha: f64,
    pub mode: FusionMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { alpha: 0.5, mode: FusionMode::FusedPredictedIou }
    }
}

impl FusionConfig {
    /// Best-performing default exponent for each training regime:
    /// 0.5 without target-IoU gradient propagation, 0.4 with it.
    pub fn default_alpha_for(propagate_target_iou_gradient: bool) -> f64 {
        if propagate_target_iou_gradient {
            0.4
        } else {
            0.5
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FusionError {
    /// A fused-predicted mode detection carries no predicted IoU.
    MissingPredictedIou { index: usize },
    /// Ground-truth mode needs an IoU for every detection.
    IncompleteGroundTruthLookup,
}

impl fmt::Display for FusionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionError::MissingPredictedIou { index } => {
                write!(f, "detection {index} has no predicted IoU for fused ranking")
            }
            FusionError::IncompleteGroundTruthLookup => {
                write!(f, "ground-truth IoU lookup does not cover every detection")
            }
        }
    }
}

impl core::error::Error for FusionError {}

/// `p^alpha * iou^(1-alpha)`, defining `0^0 = 1` so that the endpoints
/// reduce exactly to score-only (`alpha = 1`) and IoU-only (`alpha = 0`).
pub fn fuse(score: f64, iou: f64, cfg: &FusionConfig) -> f64 {
    match cfg.mode {
        FusionMode::ScoreOnly => score,
        FusionMode::FusedPredictedIou | FusionMode::FusedGroundTruthIou => {
            pow01(score, cfg.alpha) * pow01(iou, 1.0 - cfg.alpha)
        }
    }
}

fn pow01(base: f64, exp: f64) -> f64 {
    if exp == 0.0 {
        1.0
    } else if exp == 1.0 {
        base
    } else {
        libm::pow(base, exp)
    }
}

/// Annotates every detection with its fused confidence, preserving input
/// order. In ground-truth mode `gt_iou_lookup` must hold one IoU per
/// detection, aligned by index.
pub fn fuse_batch(
    dets: &[Detection],
    cfg: &FusionConfig,
    gt_iou_lookup: Option<&[f64]>,
) -> Result<Vec<Detection>, FusionError> {
    if cfg.mode == FusionMode::FusedGroundTruthIou
        && gt_iou_lookup.map(|l| l.len()) != Some(dets.len())
    {
        return Err(FusionError::IncompleteGroundTruthLookup);
    }
    dets.iter()
        .enumerate()
        .map(|(i, det)| {
            let iou = match cfg.mode {
                FusionMode::ScoreOnly => 0.0,
                FusionMode::FusedPredictedIou => det
                    .predicted_iou
                    .ok_or(FusionError::MissingPredictedIou { index: i })?,
                FusionMode::FusedGroundTruthIou => gt_iou_lookup.unwrap()[i],
            };
            let mut out = det.clone();
            out.confidence = Some(fuse(det.score, iou, cfg));
            Ok(out)
        })
        .collect()
}
