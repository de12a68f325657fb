//! A minimal trainable anchor-based detector.
//!
//! Three linear heads (classification, box regression, IoU prediction)
//! read a 3x3 feature-grid neighborhood per anchor, the closest desk-scale
//! analogue of single-convolution prediction heads. Gradients are
//! hand-derived for this fixed architecture; the finite-difference checks
//! in the test suite are the authority on their correctness.
//!
//! The `propagate_target_iou_gradient` flag switches between treating the
//! target IoU of the BCE loss as a detached constant (OFF) and letting its
//! gradient flow through the differentiable IoU and the box decoding into
//! the regression head (ON).

mod model;
mod scene;
mod train;

pub use model::{
    assign, backward, forward, loss_value, target_ious, AnchorAssignment, AnchorPrediction,
    HeadLayout, ToyError, ToyModelParams,
};
pub use scene::{anchor_grid, make_scenes, SceneSpec, ToyScene};
pub use train::{
    ablation_suite, eval_detector, extract_detections, iou_prediction_error, train,
    AblationRow, AblationTable, AblationVariant, EpochMetrics, TrainConfig, TrainOutput,
};
