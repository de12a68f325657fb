//! COCO-style AP evaluation with 101-point interpolation, plus the
//! category-agnostic/category-aware IoU pair used for confidence analysis.
//!
//! `iou_truth` is the maximal IoU of a detection to *any* ground truth in
//! its image (what the upper-bound fusion uses); `iou_eval` restricts the
//! maximum to ground truths of the detection's own category (what the
//! TP/FP decision uses). A misclassified detection can have a high
//! `iou_truth` and a low `iou_eval`.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{iou, BBox};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// The ten COCO matching thresholds 0.50:0.05:0.95.
pub fn iou_thresholds() -> [f64; 10] {
    core::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

/// COCO area-split boundaries, kept in the scene's own units.
pub const AREA_SMALL_MAX: f64 = 32.0 * 32.0;
pub const AREA_MEDIUM_MAX: f64 = 96.0 * 96.0;

/// A candidate detector output.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Detection {
    pub image_id: i64,
    pub category_id: i64,
    pub bbox: BBox,
    /// Classification score in [0, 1].
    pub score: f64,
    /// IoU predicted by the model, when it has an IoU head.
    pub predicted_iou: Option<f64>,
    /// Fused detection confidence; set by `fuse_batch`.
    pub confidence: Option<f64>,
}

impl Detection {
    /// Ranking key: the fused confidence when present, otherwise the raw
    /// classification score.
    pub fn ranking_confidence(&self) -> f64 {
        self.confidence.unwrap_or(self.score)
    }
}

/// An annotated object.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GroundTruthObject {
    pub image_id: i64,
    pub category_id: i64,
    pub bbox: BBox,
}

/// Outcome of greedy matching at one IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per detection, aligned with the input order: true positive?
    pub tp: Vec<bool>,
    /// Per detection: index of the matched ground truth, if any.
    pub matched_gt: Vec<Option<usize>>,
    /// Per ground truth, aligned with the input order: matched?
    pub gt_matched: Vec<bool>,
}

/// Greedy TP/FP labelling. Per (image, category), detections are taken in
/// descending confidence (ties by input index) and each claims the still
/// unmatched ground truth with the highest IoU among those at or above
/// `tau` (IoU ties go to the lowest ground-truth index).
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    tau: f64,
) -> MatchResult {
    let mut result = MatchResult {
        tp: vec![false; dets.len()],
        matched_gt: vec![None; dets.len()],
        gt_matched: vec![false; gts.len()],
    };
    for (_, (det_group, gt_group)) in groups(dets, gts) {
        greedy_match(dets, gts, &det_group, &gt_group, tau, None, &mut result);
    }
    result
}

/// All (image, category) groups that appear in either list, each holding
/// the member indices in input order.
fn groups(
    dets: &[Detection],
    gts: &[GroundTruthObject],
) -> Vec<((i64, i64), (Vec<usize>, Vec<usize>))> {
    let mut keys: Vec<(i64, i64)> = dets
        .iter()
        .map(|d| (d.image_id, d.category_id))
        .chain(gts.iter().map(|g| (g.image_id, g.category_id)))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .map(|key| {
            let det_idx = dets
                .iter()
                .enumerate()
                .filter(|(_, d)| (d.image_id, d.category_id) == key)
                .map(|(i, _)| i)
                .collect();
            let gt_idx = gts
                .iter()
                .enumerate()
                .filter(|(_, g)| (g.image_id, g.category_id) == key)
                .map(|(i, _)| i)
                .collect();
            (key, (det_idx, gt_idx))
        })
        .collect()
}

/// Matching within one (image, category) group. When `gt_in_range` is
/// given, only in-range ground truths can produce true positives; see
/// [`DetLabel`] for how the rest are treated.
fn greedy_match(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    det_group: &[usize],
    gt_group: &[usize],
    tau: f64,
    gt_in_range: Option<&[bool]>,
    result: &mut MatchResult,
) {
    let mut order: Vec<usize> = det_group.to_vec();
    order.sort_by(|&a, &b| {
        dets[b]
            .ranking_confidence()
            .partial_cmp(&dets[a].ranking_confidence())
            .unwrap()
            .then(a.cmp(&b))
    });
    for &d in &order {
        let mut best: Option<(usize, f64)> = None;
        for &g in gt_group {
            if result.gt_matched[g] {
                continue;
            }
            if let Some(in_range) = gt_in_range {
                if !in_range[g] {
                    continue;
                }
            }
            let ov = iou(&dets[d].bbox, &gts[g].bbox);
            if ov >= tau && best.map_or(true, |(_, b)| ov > b) {
                best = Some((g, ov));
            }
        }
        if let Some((g, _)) = best {
            result.gt_matched[g] = true;
            result.matched_gt[d] = Some(g);
            result.tp[d] = true;
        }
    }
}

/// 101-point interpolated average precision. `labels` must be TP flags
/// sorted by descending confidence; `n_gt` is the ground-truth count the
/// recall is measured against. Returns 0 when `n_gt` is 0 (the caller is
/// expected to exclude such categories from averaging).
pub fn average_precision(labels: &[bool], n_gt: usize) -> f64 {
    interpolated_precision_curve(labels, n_gt)
        .iter()
        .sum::<f64>()
        / 101.0
}

/// The 101 interpolated precision values at recalls 0.00, 0.01, ..., 1.00.
pub fn interpolated_precision_curve(labels: &[bool], n_gt: usize) -> Vec<f64> {
    if n_gt == 0 || labels.is_empty() {
        return vec![0.0; 101];
    }
    let n = labels.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let (mut tp, mut fp) = (0usize, 0usize);
    for &is_tp in labels {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    // Monotone precision envelope from the right.
    let mut envelope = precision;
    for i in (0..n - 1).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            // First position reaching the recall level; recall is
            // non-decreasing so a linear scan from the left is exact.
            recall
                .iter()
                .position(|&rc| rc >= r)
                .map_or(0.0, |i| envelope[i])
        })
        .collect()
}

/// One interpolated PR curve, averaged over categories, at a single
/// matching threshold.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct PrCurve {
    pub iou_threshold: f64,
    /// 101 interpolated precision values at recalls 0.00..=1.00.
    pub precision_at_recall: Vec<f64>,
}

/// COCO-style evaluation report.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct EvalReport {
    /// Mean AP over the ten thresholds 0.50:0.05:0.95.
    pub ap: f64,
    pub ap50: f64,
    pub ap60: f64,
    pub ap70: f64,
    pub ap75: f64,
    pub ap80: f64,
    pub ap90: f64,
    /// Ground-truth area splits at the 32^2 / 96^2 boundaries.
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    /// (threshold, AP) for all ten thresholds.
    pub ap_per_threshold: Vec<(f64, f64)>,
    pub pr_curves: Vec<PrCurve>,
}

#[derive(Clone, Copy)]
struct AreaRange {
    min: f64,
    max: f64,
}

impl AreaRange {
    const ALL: AreaRange = AreaRange { min: 0.0, max: f64::INFINITY };
    const SMALL: AreaRange = AreaRange { min: 0.0, max: AREA_SMALL_MAX };
    const MEDIUM: AreaRange = AreaRange { min: AREA_SMALL_MAX, max: AREA_MEDIUM_MAX };
    const LARGE: AreaRange = AreaRange { min: AREA_MEDIUM_MAX, max: f64::INFINITY };

    fn contains(&self, area: f64) -> bool {
        area >= self.min && area < self.max
    }

    fn unrestricted(&self) -> bool {
        self.min == 0.0 && self.max == f64::INFINITY
    }
}

/// Full report over all thresholds and area splits. Detections are ranked
/// by [`Detection::ranking_confidence`]; categories with no ground truth
/// are excluded from the averages (COCO convention).
pub fn evaluate(dets: &[Detection], gts: &[GroundTruthObject]) -> EvalReport {
    let thresholds = iou_thresholds();
    let mut per_threshold = Vec::with_capacity(10);
    let mut pr_curves = Vec::with_capacity(10);
    for &tau in &thresholds {
        let (ap, curve) = ap_at(dets, gts, tau, AreaRange::ALL);
        per_threshold.push((tau, ap));
        pr_curves.push(PrCurve { iou_threshold: tau, precision_at_recall: curve });
    }
    let mean = |range: AreaRange| -> f64 {
        let sum: f64 = thresholds.iter().map(|&t| ap_at(dets, gts, t, range).0).sum();
        sum / thresholds.len() as f64
    };

    EvalReport {
        ap: per_threshold.iter().map(|(_, a)| a).sum::<f64>() / per_threshold.len() as f64,
        ap50: per_threshold[0].1,
        ap60: per_threshold[2].1,
        ap70: per_threshold[4].1,
        ap75: per_threshold[5].1,
        ap80: per_threshold[6].1,
        ap90: per_threshold[8].1,
        ap_small: mean(AreaRange::SMALL),
        ap_medium: mean(AreaRange::MEDIUM),
        ap_large: mean(AreaRange::LARGE),
        ap_per_threshold: per_threshold,
        pr_curves,
    }
}

/// AP at one threshold/area range, averaged over categories, plus the
/// category-averaged interpolated precision curve.
fn ap_at(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    tau: f64,
    range: AreaRange,
) -> (f64, Vec<f64>) {
    let mut categories: Vec<i64> = gts.iter().map(|g| g.category_id).collect();
    categories.sort_unstable();
    categories.dedup();

    let gt_in_range: Vec<bool> = gts.iter().map(|g| range.contains(g.bbox.area())).collect();

    let mut aps = Vec::new();
    let mut curve_sum = vec![0.0; 101];
    for &cat in &categories {
        let n_gt = gts
            .iter()
            .enumerate()
            .filter(|(i, g)| g.category_id == cat && gt_in_range[*i])
            .count();
        if n_gt == 0 {
            continue;
        }
        let labels = category_labels(dets, gts, cat, tau, range, &gt_in_range);
        let curve = interpolated_precision_curve(&labels, n_gt);
        for (acc, v) in curve_sum.iter_mut().zip(&curve) {
            *acc += v;
        }
        aps.push(curve.iter().sum::<f64>() / 101.0);
    }
    if aps.is_empty() {
        return (0.0, vec![0.0; 101]);
    }
    let n = aps.len() as f64;
    for v in &mut curve_sum {
        *v /= n;
    }
    (aps.iter().sum::<f64>() / n, curve_sum)
}

/// TP labels for one category pooled across images, in descending overall
/// confidence. With a restricted area range, a detection is dropped from
/// the labels (neither TP nor FP) when it is unmatched and either its own
/// area lies outside the range or it overlaps an out-of-range ground truth
/// at `tau` or above.
fn category_labels(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    category: i64,
    tau: f64,
    range: AreaRange,
    gt_in_range: &[bool],
) -> Vec<bool> {
    let mut result = MatchResult {
        tp: vec![false; dets.len()],
        matched_gt: vec![None; dets.len()],
        gt_matched: vec![false; gts.len()],
    };
    for ((_, cat), (det_group, gt_group)) in groups(dets, gts) {
        if cat != category {
            continue;
        }
        greedy_match(dets, gts, &det_group, &gt_group, tau, Some(gt_in_range), &mut result);
    }

    let mut pool: Vec<usize> = dets
        .iter()
        .enumerate()
        .filter(|(_, d)| d.category_id == category)
        .map(|(i, _)| i)
        .collect();
    pool.sort_by(|&a, &b| {
        dets[b]
            .ranking_confidence()
            .partial_cmp(&dets[a].ranking_confidence())
            .unwrap()
            .then(a.cmp(&b))
    });

    pool.into_iter()
        .filter_map(|d| {
            if result.tp[d] {
                return Some(true);
            }
            if !range.unrestricted() {
                let near_ignored_gt = gts.iter().enumerate().any(|(g, gt)| {
                    !gt_in_range[g]
                        && gt.image_id == dets[d].image_id
                        && gt.category_id == category
                        && iou(&dets[d].bbox, &gt.bbox) >= tau
                });
                if near_ignored_gt || !range.contains(dets[d].bbox.area()) {
                    return None;
                }
            }
            Some(false)
        })
        .collect()
}

/// Category-agnostic ground-truth IoU: the maximal IoU of the detection to
/// any ground truth in its image, 0 when the image has none.
pub fn iou_truth(det: &Detection, gts: &[GroundTruthObject]) -> f64 {
    gts.iter()
        .filter(|g| g.image_id == det.image_id)
        .map(|g| iou(&det.bbox, &g.bbox))
        .fold(0.0, f64::max)
}

/// Same-category maximal IoU, the quantity the TP/FP decision is based on.
pub fn iou_eval(det: &Detection, gts: &[GroundTruthObject]) -> f64 {
    gts.iter()
        .filter(|g| g.image_id == det.image_id && g.category_id == det.category_id)
        .map(|g| iou(&det.bbox, &g.bbox))
        .fold(0.0, f64::max)
}

/// One row of the confidence-vs-IoU scatter export.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ScatterRow {
    pub confidence: f64,
    pub iou_eval: f64,
    pub iou_truth: f64,
    pub category_id: i64,
}

/// Scatter data for confidence-vs-IoU analysis, one row per detection in
/// input order.
pub fn scatter_rows(dets: &[Detection], gts: &[GroundTruthObject]) -> Vec<ScatterRow> {
    dets.iter()
        .map(|d| ScatterRow {
            confidence: d.ranking_confidence(),
            iou_eval: iou_eval(d, gts),
            iou_truth: iou_truth(d, gts),
            category_id: d.category_id,
        })
        .collect()
}
