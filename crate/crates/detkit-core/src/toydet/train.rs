//! Joint training of the three heads with plain SGD, the evaluation
//! pipeline over held-out scenes, and the gradient-flag ablation.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::confidence::{fuse_batch, FusionConfig, FusionMode};
use crate::evalmap::{evaluate, iou_truth, Detection, EvalReport, GroundTruthObject};
use crate::geometry::{decode, RegressionOffsets};
use crate::losses::{FocalParams, IouLossKind};
use crate::nms::{nms, NmsConfig};

use super::model::{backward, forward, HeadLayout, ToyError, ToyModelParams};
use super::scene::{anchor_grid, make_scenes, SceneSpec, ToyScene};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Anchors at or above this best-IoU are positive.
    pub pos_iou_threshold: f64,
    /// Anchors strictly below this best-IoU are negative; in between is
    /// ignored.
    pub neg_iou_threshold: f64,
    /// ON: the target-IoU gradient (Eq-3-2 path) reaches the regression
    /// head. OFF: the target is a detached constant.
    pub propagate_target_iou_gradient: bool,
    /// Epochs at the start trained with the flag forced off.
    pub warmup_epochs: usize,
    /// Fusion exponent used by the per-epoch evaluation.
    pub eval_alpha: f64,
    pub anchor_scales: Vec<f64>,
    /// Anchor sub-positions per cell axis (2 gives a 2x2 sub-grid).
    pub anchor_positions: usize,
    pub n_train_scenes: usize,
    pub n_eval_scenes: usize,
    pub scene: SceneSpec,
    pub focal: FocalParams,
    pub smooth_l1_beta: f64,
    pub iou_loss: IouLossKind,
    /// Detections below this class score are dropped before fusion.
    pub score_threshold: f64,
    pub nms: NmsConfig,
    /// False trains the classification and regression heads only (the
    /// score-ranked baseline detector).
    pub train_iou_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 40,
            learning_rate: 0.05,
            pos_iou_threshold: 0.5,
            neg_iou_threshold: 0.4,
            propagate_target_iou_gradient: false,
            warmup_epochs: 0,
            eval_alpha: 0.5,
            anchor_scales: alloc::vec![12.0, 18.0],
            anchor_positions: 2,
            n_train_scenes: 16,
            n_eval_scenes: 8,
            scene: SceneSpec::default(),
            focal: FocalParams::default(),
            smooth_l1_beta: 1.0,
            iou_loss: IouLossKind::Bce,
            score_threshold: 0.25,
            nms: NmsConfig::default(),
            train_iou_head: true,
        }
    }
}

impl TrainConfig {
    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            n_categories: self.scene.n_categories,
            feature_dim: self.scene.feature_dim(),
            anchor_slots: self.anchor_positions * self.anchor_positions * self.anchor_scales.len(),
        }
    }

    fn validate(&self) -> Result<(), ToyError> {
        if self.epochs == 0 {
            return Err(ToyError::InvalidConfig("epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ToyError::InvalidConfig("learning_rate must be > 0"));
        }
        if self.anchor_positions == 0 {
            return Err(ToyError::InvalidConfig("anchor_positions must be >= 1"));
        }
        if !(0.0 <= self.neg_iou_threshold
            && self.neg_iou_threshold <= self.pos_iou_threshold
            && self.pos_iou_threshold <= 1.0)
        {
            return Err(ToyError::InvalidConfig(
                "thresholds must satisfy 0 <= negative <= positive <= 1",
            ));
        }
        if self.anchor_scales.is_empty() || self.anchor_scales.iter().any(|s| !(*s > 0.0)) {
            return Err(ToyError::InvalidConfig("anchor_scales must be positive"));
        }
        if self.n_train_scenes == 0 || self.n_eval_scenes == 0 {
            return Err(ToyError::InvalidConfig("scene counts must be >= 1"));
        }
        if self.scene.gt_per_scene.0 == 0 {
            return Err(ToyError::InvalidConfig(
                "gt_per_scene minimum must be >= 1 so every batch has positives",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: ToyModelParams,
    pub metrics: Vec<EpochMetrics>,
}

/// Per-anchor detections of the model over a set of scenes: each anchor
/// contributes its best-scoring category, decoded box, and predicted IoU.
pub fn extract_detections(
    params: &ToyModelParams,
    scenes: &[ToyScene],
    cfg: &TrainConfig,
) -> Result<Vec<Detection>, ToyError> {
    let anchors = anchor_grid(&cfg.scene, &cfg.anchor_scales, cfg.anchor_positions);
    let mut dets = Vec::new();
    for scene in scenes {
        for (anchor, pred) in anchors.iter().zip(forward(params, scene, cfg)) {
            let (best_cat, &score) = pred
                .class_probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .expect("at least one category");
            if score < cfg.score_threshold {
                continue;
            }
            let offsets = RegressionOffsets {
                d_cx: pred.offsets[0],
                d_cy: pred.offsets[1],
                d_w: pred.offsets[2],
                d_h: pred.offsets[3],
            };
            dets.push(Detection {
                image_id: scene.image_id,
                category_id: best_cat as i64,
                bbox: decode(anchor, &offsets)?,
                score,
                predicted_iou: Some(pred.pred_iou),
                confidence: None,
            });
        }
    }
    Ok(dets)
}

/// Full fuse -> NMS -> evaluate pipeline for a trained model on held-out
/// scenes.
pub fn eval_detector(
    params: &ToyModelParams,
    scenes: &[ToyScene],
    cfg: &TrainConfig,
    mode: FusionMode,
    alpha: f64,
) -> Result<EvalReport, ToyError> {
    let dets = extract_detections(params, scenes, cfg)?;
    let gts: Vec<GroundTruthObject> =
        scenes.iter().flat_map(|s| s.gts.iter().cloned()).collect();
    let lookup: Option<Vec<f64>> = match mode {
        FusionMode::FusedGroundTruthIou => {
            Some(dets.iter().map(|d| iou_truth(d, &gts)).collect())
        }
        _ => None,
    };
    let fused = fuse_batch(&dets, &FusionConfig { alpha, mode }, lookup.as_deref())
        .expect("extracted detections always carry scores and predicted IoUs");
    let kept = nms(&fused, &cfg.nms);
    Ok(evaluate(&kept, &gts))
}

/// Mean absolute error between the predicted IoU and the true IoU over
/// the detections the full pipeline keeps (fuse with the config's eval
/// exponent, then NMS). The untrained model keeps a flat spread of
/// constant-0.5 predictions mostly over background, so this dropping is
/// the sign that the IoU head learned something.
pub fn iou_prediction_error(
    params: &ToyModelParams,
    scenes: &[ToyScene],
    cfg: &TrainConfig,
) -> Result<f64, ToyError> {
    let dets = extract_detections(params, scenes, cfg)?;
    let fused = fuse_batch(
        &dets,
        &FusionConfig { alpha: cfg.eval_alpha, mode: FusionMode::FusedPredictedIou },
        None,
    )
    .expect("extracted detections always carry predicted IoUs");
    let kept = nms(&fused, &cfg.nms);
    if kept.is_empty() {
        return Ok(1.0);
    }
    let gts: Vec<GroundTruthObject> =
        scenes.iter().flat_map(|s| s.gts.iter().cloned()).collect();
    let total: f64 = kept
        .iter()
        .map(|d| (d.predicted_iou.unwrap() - iou_truth(d, &gts)).abs())
        .sum();
    Ok(total / kept.len() as f64)
}

/// Trains from zero-initialized parameters with plain SGD. Deterministic
/// for a fixed config; a non-finite loss aborts with the epoch number.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput, ToyError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train_scenes = make_scenes(&mut rng, cfg.n_train_scenes, &cfg.scene, 0);
    let eval_scenes = make_scenes(&mut rng, cfg.n_eval_scenes, &cfg.scene, 0);

    let mut params = ToyModelParams::zeros(cfg.layout());
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let eval_mode = if cfg.train_iou_head {
        FusionMode::FusedPredictedIou
    } else {
        FusionMode::ScoreOnly
    };

    for epoch in 0..cfg.epochs {
        let mut epoch_cfg = cfg.clone();
        if epoch < cfg.warmup_epochs {
            epoch_cfg.propagate_target_iou_gradient = false;
        }
        let mut loss_sum = 0.0;
        let mut trained = 0usize;
        for scene in &train_scenes {
            match backward(&mut params, scene, &epoch_cfg) {
                Ok(loss) => {
                    if !loss.is_finite() {
                        return Err(ToyError::Diverged { epoch });
                    }
                    loss_sum += loss;
                    trained += 1;
                    for (v, g) in params.values.iter_mut().zip(&params.grads) {
                        *v -= cfg.learning_rate * g;
                    }
                }
                Err(ToyError::NoPositiveAnchors) => continue,
                Err(e) => return Err(e),
            }
        }
        let mean_loss = if trained == 0 { 0.0 } else { loss_sum / trained as f64 };
        if !mean_loss.is_finite() {
            return Err(ToyError::Diverged { epoch });
        }
        let eval = eval_detector(&params, &eval_scenes, cfg, eval_mode, cfg.eval_alpha)?;
        metrics.push(EpochMetrics { epoch, mean_loss, eval });
    }

    Ok(TrainOutput { params, metrics })
}

/// The three detector variants the gradient-flag ablation compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AblationVariant {
    /// No IoU head; score-only ranking.
    Baseline,
    /// IoU head trained with the target detached.
    IouHeadDetached,
    /// IoU head trained with the target-IoU gradient propagated.
    IouHeadPropagated,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [
        AblationVariant::Baseline,
        AblationVariant::IouHeadDetached,
        AblationVariant::IouHeadPropagated,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AblationVariant::Baseline => "baseline",
            AblationVariant::IouHeadDetached => "iou_head_flag_off",
            AblationVariant::IouHeadPropagated => "iou_head_flag_on",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationRow {
    pub seed: u64,
    pub variant: AblationVariant,
    /// Fusion exponent that maximized AP for this run (1.0 for the
    /// baseline, which ranks on the score).
    pub best_alpha: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AblationTable {
    pub alphas: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn rows_for(&self, variant: AblationVariant) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(move |r| r.variant == variant)
    }

    pub fn mean_ap(&self, variant: AblationVariant) -> f64 {
        let aps: Vec<f64> = self.rows_for(variant).map(|r| r.report.ap).collect();
        if aps.is_empty() {
            0.0
        } else {
            aps.iter().sum::<f64>() / aps.len() as f64
        }
    }

    /// Per-seed wins/losses of `a` over `b` on AP, with the one-sided sign
    /// test p-value. Ties are discarded.
    pub fn sign_test(&self, a: AblationVariant, b: AblationVariant) -> (usize, usize, f64) {
        let mut wins = 0;
        let mut losses = 0;
        for row_a in self.rows_for(a) {
            if let Some(row_b) = self.rows_for(b).find(|r| r.seed == row_a.seed) {
                if row_a.report.ap > row_b.report.ap {
                    wins += 1;
                } else if row_a.report.ap < row_b.report.ap {
                    losses += 1;
                }
            }
        }
        (wins, losses, crate::stats::sign_test_p(wins, losses))
    }
}

fn variant_config(base: &TrainConfig, seed: u64, variant: AblationVariant) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    match variant {
        AblationVariant::Baseline => {
            cfg.train_iou_head = false;
            cfg.propagate_target_iou_gradient = false;
        }
        AblationVariant::IouHeadDetached => {
            cfg.train_iou_head = true;
            cfg.propagate_target_iou_gradient = false;
        }
        AblationVariant::IouHeadPropagated => {
            cfg.train_iou_head = true;
            cfg.propagate_target_iou_gradient = true;
        }
    }
    cfg
}

/// Trains every variant on every seed and evaluates each at its best
/// fusion exponent over the given sweep.
pub fn ablation_suite(
    base: &TrainConfig,
    seeds: &[u64],
    alphas: &[f64],
) -> Result<AblationTable, ToyError> {
    if alphas.is_empty() {
        return Err(ToyError::InvalidConfig("alpha sweep must be non-empty"));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for variant in AblationVariant::ALL {
            let cfg = variant_config(base, seed, variant);
            let output = train(&cfg)?;
            // Rebuild the held-out scenes exactly as `train` saw them.
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let _ = make_scenes(&mut rng, cfg.n_train_scenes, &cfg.scene, 0);
            let eval_scenes = make_scenes(&mut rng, cfg.n_eval_scenes, &cfg.scene, 0);

            let (best_alpha, report) = match variant {
                AblationVariant::Baseline => (
                    1.0,
                    eval_detector(&output.params, &eval_scenes, &cfg, FusionMode::ScoreOnly, 1.0)?,
                ),
                _ => {
                    let mut best: Option<(f64, EvalReport)> = None;
                    for &alpha in alphas {
                        let report = eval_detector(
                            &output.params,
                            &eval_scenes,
                            &cfg,
                            FusionMode::FusedPredictedIou,
                            alpha,
                        )?;
                        if best.as_ref().map_or(true, |(_, b)| report.ap > b.ap) {
                            best = Some((alpha, report));
                        }
                    }
                    best.expect("non-empty sweep")
                }
            };
            rows.push(AblationRow { seed, variant, best_alpha, report });
        }
    }
    Ok(AblationTable { alphas: alphas.to_vec(), rows })
}
