//! Greedy per-category non-maximum suppression ranked by detection
//! confidence.
//!
//! Categories never suppress each other and images are independent; the
//! threshold comparison is a strict `>` so results are bit-stable.

use alloc::vec::Vec;

use crate::evalmap::Detection;
use crate::geometry::iou;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct NmsConfig {
    pub iou_threshold: f64,
    /// Optional cap on kept detections per (image, category).
    pub max_kept: Option<usize>,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.5, max_kept: None }
    }
}

/// Greedy NMS. Detections must carry a fused confidence (see
/// [`crate::confidence::fuse_batch`]); ranking is by descending confidence
/// with ties broken by input index. The kept list is returned in that
/// order.
pub fn nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    debug_assert!(cfg.iou_threshold > 0.0 && cfg.iou_threshold < 1.0);
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let ca = confidence_of(&dets[a]);
        let cb = confidence_of(&dets[b]);
        cb.partial_cmp(&ca).unwrap().then(a.cmp(&b))
    });

    let mut suppressed = alloc::vec![false; dets.len()];
    let mut kept: Vec<usize> = Vec::new();
    let mut kept_per_group: Vec<((i64, i64), usize)> = Vec::new();

    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        let group = (dets[i].image_id, dets[i].category_id);
        if let Some(cap) = cfg.max_kept {
            let count = kept_per_group
                .iter_mut()
                .find(|(g, _)| *g == group)
                .map(|(_, c)| c);
            match count {
                Some(c) if *c >= cap => {
                    suppressed[i] = true;
                    continue;
                }
                Some(c) => *c += 1,
                None => kept_per_group.push((group, 1)),
            }
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            if dets[j].image_id == dets[i].image_id
                && dets[j].category_id == dets[i].category_id
                && iou(&dets[i].bbox, &dets[j].bbox) > cfg.iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }

    kept.into_iter().map(|i| dets[i].clone()).collect()
}

fn confidence_of(det: &Detection) -> f64 {
    det.confidence
        .expect("detection confidence must be set before NMS; run fuse_batch first")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use alloc::vec;

    fn det(category: i64, bbox: BBox, confidence: f64) -> Detection {
        Detection {
            image_id: 0,
            category_id: category,
            bbox,
            score: confidence,
            predicted_iou: None,
            confidence: Some(confidence),
        }
    }

    #[test]
    fn single_detection_kept() {
        let d = det(0, BBox::new(0.0, 0.0, 1.0, 1.0), 0.9);
        let kept = nms(&[d.clone()], &NmsConfig::default());
        assert_eq!(kept, vec![d]);
    }

    #[test]
    fn direct_suppression() {
        let a = det(0, BBox::new(0.0, 0.0, 10.0, 10.0), 0.8);
        let b = det(0, BBox::new(0.2, 0.2, 10.0, 10.0), 0.6);
        assert!(iou(&a.bbox, &b.bbox) > 0.9);
        let kept = nms(&[a.clone(), b], &NmsConfig::default());
        assert_eq!(kept, vec![a]);
    }

    #[test]
    fn different_categories_do_not_suppress() {
        let a = det(0, BBox::new(0.0, 0.0, 10.0, 10.0), 0.8);
        let b = det(1, BBox::new(0.0, 0.0, 10.0, 10.0), 0.6);
        let kept = nms(&[a, b], &NmsConfig::default());
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn different_images_do_not_suppress() {
        let a = det(0, BBox::new(0.0, 0.0, 10.0, 10.0), 0.8);
        let mut b = det(0, BBox::new(0.0, 0.0, 10.0, 10.0), 0.6);
        b.image_id = 1;
        let kept = nms(&[a, b], &NmsConfig::default());
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn output_sorted_by_confidence_with_stable_ties() {
        let dets = vec![
            det(0, BBox::new(0.0, 0.0, 1.0, 1.0), 0.5),
            det(0, BBox::new(20.0, 0.0, 21.0, 1.0), 0.9),
            det(0, BBox::new(40.0, 0.0, 41.0, 1.0), 0.5),
        ];
        let kept = nms(&dets, &NmsConfig::default());
        assert_eq!(kept.len(), 3);
        assert_eq!(kept[0].bbox, dets[1].bbox);
        assert_eq!(kept[1].bbox, dets[0].bbox);
        assert_eq!(kept[2].bbox, dets[2].bbox);
    }

    #[test]
    fn max_kept_caps_per_category() {
        let dets: Vec<Detection> = (0..5)
            .map(|k| {
                det(
                    0,
                    BBox::new(k as f64 * 30.0, 0.0, k as f64 * 30.0 + 1.0, 1.0),
                    0.9 - 0.1 * k as f64,
                )
            })
            .collect();
        let kept = nms(&dets, &NmsConfig { iou_threshold: 0.5, max_kept: Some(2) });
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn input_order_is_irrelevant_off_ties() {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let dets: Vec<Detection> = (0..12)
                .map(|i| {
                    let x1: f64 = rng.gen_range(0.0..30.0);
                    let y1: f64 = rng.gen_range(0.0..30.0);
                    det(
                        rng.gen_range(0..2),
                        BBox::new(x1, y1, x1 + rng.gen_range(2.0..15.0), y1 + rng.gen_range(2.0..15.0)),
                        0.02 + 0.08 * i as f64,
                    )
                })
                .collect();
            let reference = nms(&dets, &NmsConfig::default());
            let mut shuffled = dets.clone();
            shuffled.shuffle(&mut rng);
            assert_eq!(nms(&shuffled, &NmsConfig::default()), reference);
        }
    }

    /// Inaccurate-but-confident boxes suppress accurate ones under score
    /// ranking; a well-correlated fused confidence flips the survivor.
    #[test]
    fn fused_ranking_rescues_accurate_boxes() {
        let gt = BBox::new(10.0, 10.0, 30.0, 30.0);
        let accurate = BBox::new(10.5, 10.2, 30.2, 30.4); // IoU with gt ~ 0.93
        let sloppy = BBox::new(13.0, 13.0, 36.0, 34.0); // IoU with gt ~ 0.5
        assert!(iou(&accurate, &gt) > 0.9);
        assert!(iou(&sloppy, &gt) < 0.6);
        assert!(iou(&accurate, &sloppy) > 0.5);

        // Score ranking: the sloppy box wins.
        let by_score = vec![det(0, accurate, 0.6), det(0, sloppy, 0.8)];
        let kept = nms(&by_score, &NmsConfig::default());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].bbox, sloppy);

        // Fused ranking with a correlated predicted IoU: the accurate box
        // wins. 0.6^0.5 * 0.93^0.5 > 0.8^0.5 * 0.5^0.5.
        let fused = vec![
            det(0, accurate, libm::sqrt(0.6 * iou(&accurate, &gt))),
            det(0, sloppy, libm::sqrt(0.8 * iou(&sloppy, &gt))),
        ];
        let kept = nms(&fused, &NmsConfig::default());
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].bbox, accurate);
    }
}
