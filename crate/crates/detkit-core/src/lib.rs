//! IoU-aware detection toolkit.
//!
//! Implements the full post-processing path of an IoU-aware single-stage
//! detector: box geometry and anchor encoding, the three training losses
//! with analytic gradients, IoU-aware confidence fusion, per-category NMS,
//! COCO-style AP evaluation, a synthetic detection simulator, and a small
//! trainable anchor-based detector for end-to-end experiments.
//!
//! The crate is `no_std` + `alloc`; all operations are pure functions on
//! value data. File formats and the CLI live in the companion `detkit`
//! crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod confidence;
pub mod evalmap;
pub mod geometry;
pub mod losses;
pub mod nms;
pub mod simgen;
pub mod stats;
pub mod toydet;

pub(crate) mod rngutil;

pub use confidence::{fuse, fuse_batch, FusionConfig, FusionError, FusionMode};
pub use evalmap::{
    average_precision, evaluate, iou_eval, iou_truth, match_detections, scatter_rows, Detection,
    EvalReport, GroundTruthObject, MatchResult, ScatterRow,
};
pub use geometry::{decode, encode, iou, iou_gradient, BBox, GeometryError, RegressionOffsets};
pub use losses::{
    focal_loss, iou_bce_grad_wrt_target, iou_bce_loss, iou_l2_loss, smooth_l1_loss, total_loss,
    FocalParams, IouLossKind, LossBatch, LossError,
};
pub use nms::{nms, NmsConfig};
pub use simgen::{generate, mismatch_demo, run_pipeline, MismatchReport, SimConfig, SimError, SimScene};
