//! Seeded synthetic detection scenes.
//!
//! The generator models a detector whose classification score is only
//! weakly coupled to localization accuracy: ground truths are placed at
//! random, detections are jittered copies (plus clutter false positives),
//! scores come from a noisy logistic model of the true IoU, and the
//! predicted IoU is the true IoU plus clamped Gaussian noise. All sampling
//! is driven by one seeded stream, so a scene is a pure function of its
//! config.

use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::confidence::{fuse_batch, FusionConfig, FusionError, FusionMode};
use crate::evalmap::{evaluate, iou_truth, Detection, EvalReport, GroundTruthObject};
use crate::geometry::{iou, BBox};
use crate::nms::{nms, NmsConfig};
use crate::rngutil::{log_uniform, normal};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SimConfig {
    pub seed: u64,
    pub n_images: usize,
    pub n_categories: usize,
    /// Side length of the square canvas.
    pub canvas_size: f64,
    /// Inclusive range of ground truths per image.
    pub gt_per_image: (usize, usize),
    /// Log-uniform range of box side lengths.
    pub gt_size_range: (f64, f64),
    /// Inclusive range of detections generated per ground truth.
    pub detections_per_gt: (usize, usize),
    /// Upper corner-jitter scale as a fraction of the box extent; each
    /// detection draws its own scale uniformly below this, spreading the
    /// true-IoU distribution from near-perfect to poor.
    pub localization_noise: f64,
    /// Coupling of the score logit to the true IoU; 0 makes scores pure
    /// noise, matching heads trained with independent objectives.
    pub score_coupling: f64,
    /// True-IoU level where the score's localization signal saturates: the
    /// score cannot tell apart boxes above this overlap.
    pub score_saturation: f64,
    pub score_noise: f64,
    pub score_gain: f64,
    pub score_bias: f64,
    /// Logit margin separating correct-category detections from flipped
    /// ones and clutter; the score knows the category, the IoU does not.
    pub class_margin: f64,
    /// Additive Gaussian noise on the predicted IoU before clamping.
    pub iou_predictor_noise: f64,
    /// Expected clutter detections per ground truth.
    pub false_positive_rate: f64,
    /// Probability that a detection's category is flipped, producing the
    /// misclassified population with high iou_truth but low iou_eval.
    pub misclassification_rate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 40,
            n_categories: 3,
            canvas_size: 640.0,
            gt_per_image: (2, 6),
            gt_size_range: (16.0, 200.0),
            detections_per_gt: (1, 4),
            localization_noise: 0.25,
            score_coupling: 0.25,
            score_saturation: 0.7,
            score_noise: 0.35,
            score_gain: 2.0,
            score_bias: 0.0,
            class_margin: 1.5,
            iou_predictor_noise: 0.15,
            false_positive_rate: 0.3,
            misclassification_rate: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimError {
    InvalidConfig(&'static str),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::InvalidConfig(what) => write!(f, "invalid simulation config: {what}"),
        }
    }
}

impl core::error::Error for SimError {}

/// A generated scene: ground truths plus raw detections, with each
/// detection's true IoU (its `iou_truth`) stored alongside.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SimScene {
    pub gts: Vec<GroundTruthObject>,
    pub dets: Vec<Detection>,
    /// Parallel to `dets`: the category-agnostic max IoU to any ground
    /// truth in the detection's image.
    pub true_ious: Vec<f64>,
}

impl SimScene {
    /// Stored true IoUs must equal `iou_truth` recomputed from geometry.
    pub fn is_self_consistent(&self) -> bool {
        self.dets
            .iter()
            .zip(&self.true_ious)
            .all(|(d, &t)| (iou_truth(d, &self.gts) - t).abs() < 1e-12)
    }
}

fn validate(cfg: &SimConfig) -> Result<(), SimError> {
    if cfg.n_images == 0 {
        return Err(SimError::InvalidConfig("n_images must be >= 1"));
    }
    if cfg.n_categories == 0 {
        return Err(SimError::InvalidConfig("n_categories must be >= 1"));
    }
    if !(cfg.canvas_size > 0.0) {
        return Err(SimError::InvalidConfig("canvas_size must be > 0"));
    }
    if cfg.gt_per_image.0 > cfg.gt_per_image.1 {
        return Err(SimError::InvalidConfig("gt_per_image range is inverted"));
    }
    if cfg.detections_per_gt.0 > cfg.detections_per_gt.1 {
        return Err(SimError::InvalidConfig("detections_per_gt range is inverted"));
    }
    if !(cfg.gt_size_range.0 > 0.0 && cfg.gt_size_range.1 >= cfg.gt_size_range.0) {
        return Err(SimError::InvalidConfig("gt_size_range must satisfy 0 < lo <= hi"));
    }
    if cfg.gt_size_range.1 > cfg.canvas_size {
        return Err(SimError::InvalidConfig("gt_size_range exceeds the canvas"));
    }
    for (v, what) in [
        (cfg.localization_noise, "localization_noise"),
        (cfg.score_noise, "score_noise"),
        (cfg.score_gain, "score_gain"),
        (cfg.score_saturation, "score_saturation"),
        (cfg.class_margin, "class_margin"),
        (cfg.iou_predictor_noise, "iou_predictor_noise"),
        (cfg.false_positive_rate, "false_positive_rate"),
    ] {
        if !(v >= 0.0) {
            let _ = what;
            return Err(SimError::InvalidConfig("rates and scales must be >= 0"));
        }
    }
    if !(0.0..=1.0).contains(&cfg.misclassification_rate) {
        return Err(SimError::InvalidConfig("misclassification_rate must be in [0, 1]"));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn random_box(rng: &mut ChaCha8Rng, cfg: &SimConfig) -> BBox {
    let w = log_uniform(rng, cfg.gt_size_range.0, cfg.gt_size_range.1);
    let h = log_uniform(rng, cfg.gt_size_range.0, cfg.gt_size_range.1);
    let cx = rng.gen_range(0.5 * w..=cfg.canvas_size - 0.5 * w);
    let cy = rng.gen_range(0.5 * h..=cfg.canvas_size - 0.5 * h);
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

fn jittered_box(rng: &mut ChaCha8Rng, base: &BBox, noise: f64) -> BBox {
    let w = base.width();
    let h = base.height();
    let mut x1 = base.x1 + normal(rng) * noise * w;
    let mut x2 = base.x2 + normal(rng) * noise * w;
    let mut y1 = base.y1 + normal(rng) * noise * h;
    let mut y2 = base.y2 + normal(rng) * noise * h;
    if x1 > x2 {
        core::mem::swap(&mut x1, &mut x2);
    }
    if y1 > y2 {
        core::mem::swap(&mut y1, &mut y2);
    }
    BBox::new(x1, y1, x2, y2)
}

/// Deterministically generates a scene from the config.
pub fn generate(cfg: &SimConfig) -> Result<SimScene, SimError> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gts: Vec<GroundTruthObject> = Vec::new();
    let mut dets: Vec<Detection> = Vec::new();

    for image_id in 0..cfg.n_images as i64 {
        let image_gt_start = gts.len();
        let n_gt = rng.gen_range(cfg.gt_per_image.0..=cfg.gt_per_image.1);
        for _ in 0..n_gt {
            gts.push(GroundTruthObject {
                image_id,
                category_id: rng.gen_range(0..cfg.n_categories) as i64,
                bbox: random_box(&mut rng, cfg),
            });
        }
        let image_gts = image_gt_start..gts.len();

        let image_det_start = dets.len();
        // +1 for correct-category detections, -1 for flipped or clutter.
        let mut margin_signs: Vec<f64> = Vec::new();
        for g in image_gts.clone() {
            let n_det = rng.gen_range(cfg.detections_per_gt.0..=cfg.detections_per_gt.1);
            for _ in 0..n_det {
                // Per-detection jitter scale spreads the IoU distribution
                // from near-perfect to poor.
                let scale = cfg.localization_noise * rng.gen::<f64>();
                let bbox = jittered_box(&mut rng, &gts[g].bbox, scale);
                let mut category_id = gts[g].category_id;
                let mut sign = 1.0;
                if cfg.n_categories > 1 && rng.gen_bool(cfg.misclassification_rate) {
                    let shift = rng.gen_range(1..cfg.n_categories) as i64;
                    category_id = (category_id + shift) % cfg.n_categories as i64;
                    sign = -1.0;
                }
                margin_signs.push(sign);
                dets.push(Detection {
                    image_id,
                    category_id,
                    bbox,
                    score: 0.0,
                    predicted_iou: None,
                    confidence: None,
                });
            }
        }
        // Clutter detections near no particular object.
        let expected_fp = cfg.false_positive_rate * n_gt as f64;
        let mut n_fp = expected_fp as usize;
        if rng.gen_bool((expected_fp - n_fp as f64).clamp(0.0, 1.0)) {
            n_fp += 1;
        }
        for _ in 0..n_fp {
            margin_signs.push(-1.0);
            dets.push(Detection {
                image_id,
                category_id: rng.gen_range(0..cfg.n_categories) as i64,
                bbox: random_box(&mut rng, cfg),
                score: 0.0,
                predicted_iou: None,
                confidence: None,
            });
        }

        // Score and predicted IoU need every box of the image in place,
        // because the true IoU is the max over all ground truths.
        let image_gt_slice = &gts[image_gts];
        for (det, sign) in dets[image_det_start..].iter_mut().zip(&margin_signs) {
            let t = image_gt_slice
                .iter()
                .map(|g| iou(&det.bbox, &g.bbox))
                .fold(0.0, f64::max);
            let z = cfg.score_coupling * (2.0 * t.min(cfg.score_saturation) - 1.0)
                + sign * cfg.class_margin
                + cfg.score_noise * normal(&mut rng);
            det.score = sigmoid(cfg.score_gain * z + cfg.score_bias);
            det.predicted_iou =
                Some((t + cfg.iou_predictor_noise * normal(&mut rng)).clamp(0.0, 1.0));
        }
    }

    let true_ious = dets.iter().map(|d| iou_truth(d, &gts)).collect();
    Ok(SimScene { gts, dets, true_ious })
}

/// Fuse, suppress, evaluate. In ground-truth fusion mode the stored true
/// IoUs are the lookup.
pub fn run_pipeline(
    scene: &SimScene,
    fusion_cfg: &FusionConfig,
    nms_cfg: &NmsConfig,
) -> Result<EvalReport, FusionError> {
    let lookup = match fusion_cfg.mode {
        FusionMode::FusedGroundTruthIou => Some(scene.true_ious.as_slice()),
        _ => None,
    };
    let fused = fuse_batch(&scene.dets, fusion_cfg, lookup)?;
    let kept = nms(&fused, nms_cfg);
    Ok(evaluate(&kept, &scene.gts))
}

/// Suppression-flip statistics for the score-vs-fused ranking comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MismatchReport {
    /// Same-image, same-category pairs overlapping above the NMS
    /// threshold.
    pub pairs_considered: usize,
    /// Pairs where score ranking keeps the worse-localized box and fused
    /// ranking keeps the better-localized one.
    pub flips: usize,
}

/// Counts suppression flips between score ranking and fused ranking over
/// all conflicting detection pairs.
pub fn mismatch_demo(
    scene: &SimScene,
    fusion_cfg: &FusionConfig,
    nms_cfg: &NmsConfig,
) -> Result<MismatchReport, FusionError> {
    let lookup = match fusion_cfg.mode {
        FusionMode::FusedGroundTruthIou => Some(scene.true_ious.as_slice()),
        _ => None,
    };
    let fused = fuse_batch(&scene.dets, fusion_cfg, lookup)?;
    let mut pairs = 0;
    let mut flips = 0;
    for i in 0..scene.dets.len() {
        for j in i + 1..scene.dets.len() {
            let (a, b) = (&scene.dets[i], &scene.dets[j]);
            if a.image_id != b.image_id || a.category_id != b.category_id {
                continue;
            }
            if iou(&a.bbox, &b.bbox) <= nms_cfg.iou_threshold {
                continue;
            }
            pairs += 1;
            let score_winner = if b.score > a.score { j } else { i };
            let fused_winner = if fused[j].confidence.unwrap() > fused[i].confidence.unwrap() {
                j
            } else {
                i
            };
            if scene.true_ious[fused_winner] > scene.true_ious[score_winner] {
                flips += 1;
            }
        }
    }
    Ok(MismatchReport { pairs_considered: pairs, flips })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::pearson;
    use alloc::vec;
    use alloc::vec::Vec;

    #[test]
    fn same_seed_identical_scene() {
        let cfg = SimConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate(&SimConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_scene_is_self_consistent() {
        let scene = generate(&SimConfig::default()).unwrap();
        assert!(scene.is_self_consistent());
        assert!(!scene.dets.is_empty());
        for (d, t) in scene.dets.iter().zip(&scene.true_ious) {
            assert!((0.0..=1.0).contains(&d.score));
            assert!((0.0..=1.0).contains(&d.predicted_iou.unwrap()));
            assert!((0.0..=1.0).contains(t));
        }
    }

    #[test]
    fn zero_coupling_decorrelates_scores() {
        // Both localization pathways into the score are switched off: the
        // direct coupling and the class margin (clutter is located away
        // from objects, so a margin alone already correlates).
        let cfg = SimConfig {
            seed: 3,
            n_images: 400,
            gt_per_image: (3, 5),
            detections_per_gt: (2, 4),
            score_coupling: 0.0,
            class_margin: 0.0,
            ..SimConfig::default()
        };
        let scene = generate(&cfg).unwrap();
        assert!(scene.dets.len() > 2000, "sample size {}", scene.dets.len());
        let scores: Vec<f64> = scene.dets.iter().map(|d| d.score).collect();
        let corr = pearson(&scores, &scene.true_ious);
        assert!(corr.abs() < 0.03, "corr = {corr}");

        // With the default class margin restored, scores pick up the
        // clutter/object separation and correlate positively.
        let with_margin = generate(&SimConfig { class_margin: 1.5, ..cfg }).unwrap();
        let scores: Vec<f64> = with_margin.dets.iter().map(|d| d.score).collect();
        assert!(pearson(&scores, &with_margin.true_ious) > 0.2);
    }

    #[test]
    fn noiseless_single_detection_per_gt_is_exact() {
        let cfg = SimConfig {
            false_positive_rate: 0.0,
            detections_per_gt: (1, 1),
            localization_noise: 0.0,
            misclassification_rate: 0.0,
            ..SimConfig::default()
        };
        let scene = generate(&cfg).unwrap();
        assert_eq!(scene.dets.len(), scene.gts.len());
        for t in &scene.true_ious {
            assert_eq!(*t, 1.0);
        }
    }

    #[test]
    fn degenerate_configs_rejected() {
        let base = SimConfig::default();
        for bad in [
            SimConfig { n_images: 0, ..base.clone() },
            SimConfig { gt_per_image: (5, 2), ..base.clone() },
            SimConfig { gt_size_range: (0.0, 10.0), ..base.clone() },
            SimConfig { gt_size_range: (16.0, 10_000.0), ..base.clone() },
            SimConfig { localization_noise: -0.1, ..base.clone() },
            SimConfig { misclassification_rate: 1.5, ..base.clone() },
        ] {
            assert!(generate(&bad).is_err());
        }
    }

    #[test]
    fn perfect_predictor_equals_ground_truth_fusion() {
        let cfg = SimConfig { seed: 9, iou_predictor_noise: 0.0, ..SimConfig::default() };
        let scene = generate(&cfg).unwrap();
        let nms_cfg = NmsConfig::default();
        for alpha in [0.3, 0.5, 0.8] {
            let pred = run_pipeline(
                &scene,
                &FusionConfig { alpha, mode: FusionMode::FusedPredictedIou },
                &nms_cfg,
            )
            .unwrap();
            let truth = run_pipeline(
                &scene,
                &FusionConfig { alpha, mode: FusionMode::FusedGroundTruthIou },
                &nms_cfg,
            )
            .unwrap();
            assert_eq!(pred.ap, truth.ap);
            assert_eq!(pred.ap_per_threshold, truth.ap_per_threshold);
        }
    }

    /// Three pairs in the style of the suppression-mismatch figure: the
    /// well-localized box has the lower score in every pair.
    fn three_pair_scene() -> SimScene {
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        let mut true_ious = Vec::new();
        for image_id in 0..3 {
            let g = BBox::new(10.0, 10.0, 30.0, 30.0);
            gts.push(GroundTruthObject { image_id, category_id: 0, bbox: g });
            let accurate = BBox::new(10.5, 10.2, 30.2, 30.4);
            let sloppy = BBox::new(13.0, 13.0, 36.0, 34.0);
            for (bbox, score) in [(accurate, 0.6), (sloppy, 0.8)] {
                let t = iou(&bbox, &g);
                dets.push(Detection {
                    image_id,
                    category_id: 0,
                    bbox,
                    score,
                    predicted_iou: Some(t),
                    confidence: None,
                });
                true_ious.push(t);
            }
        }
        SimScene { gts, dets, true_ious }
    }

    #[test]
    fn mismatch_demo_counts_fig1_style_flips() {
        let scene = three_pair_scene();
        assert!(scene.is_self_consistent());
        let fusion = FusionConfig { alpha: 0.5, mode: FusionMode::FusedPredictedIou };
        let nms_cfg = NmsConfig::default();
        let report = mismatch_demo(&scene, &fusion, &nms_cfg).unwrap();
        assert_eq!(report.pairs_considered, 3);
        assert_eq!(report.flips, 3);

        // Brute-force NMS traces agree with the pair analysis: under score
        // ranking every sloppy box survives, under fused ranking every
        // accurate box does.
        let score_only = fuse_batch(
            &scene.dets,
            &FusionConfig { alpha: 1.0, mode: FusionMode::ScoreOnly },
            None,
        )
        .unwrap();
        let kept = nms(&score_only, &nms_cfg);
        assert_eq!(kept.len(), 3);
        assert!(kept.iter().all(|d| d.score == 0.8));

        let fused = fuse_batch(&scene.dets, &fusion, None).unwrap();
        let kept = nms(&fused, &nms_cfg);
        assert_eq!(kept.len(), 3);
        assert!(kept.iter().all(|d| d.score == 0.6));
    }

    #[test]
    fn correlated_scores_produce_no_flips() {
        let mut scene = three_pair_scene();
        // Make the score order agree with the localization order.
        for (det, &t) in scene.dets.iter_mut().zip(&scene.true_ious) {
            det.score = t;
        }
        let report = mismatch_demo(
            &scene,
            &FusionConfig { alpha: 0.5, mode: FusionMode::FusedPredictedIou },
            &NmsConfig::default(),
        )
        .unwrap();
        assert_eq!(report.pairs_considered, 3);
        assert_eq!(report.flips, 0);
    }

    #[test]
    fn empty_overlap_set_reports_zero() {
        let scene = SimScene { gts: vec![], dets: vec![], true_ious: vec![] };
        let report = mismatch_demo(
            &scene,
            &FusionConfig::default(),
            &NmsConfig::default(),
        )
        .unwrap();
        assert_eq!(report.pairs_considered, 0);
        assert_eq!(report.flips, 0);
    }
}
