//! Independent oracles for the integration and acceptance tests.
//!
//! Everything here re-derives results from first principles (pairwise IoU
//! tables, exhaustive greedy replay, definition-level AP) without touching
//! the library's evaluation path, so agreement is meaningful.

use detkit_core::geometry::BBox;
use detkit_core::{Detection, GroundTruthObject};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// IoU recomputed from scratch for the oracle side.
pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let area_a = (a.x2 - a.x1) * (a.y2 - a.y1);
    let area_b = (b.x2 - b.x1) * (b.y2 - b.y1);
    let union = area_a + area_b - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Brute-force greedy matcher: detections in descending confidence (ties
/// by index) each claim the unmatched same-image, same-category ground
/// truth with the highest IoU at or above `tau` (ties to the lowest
/// ground-truth index). Returns per-detection TP flags.
pub fn bruteforce_match(dets: &[Detection], gts: &[GroundTruthObject], tau: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let ca = dets[a].confidence.unwrap_or(dets[a].score);
        let cb = dets[b].confidence.unwrap_or(dets[b].score);
        cb.partial_cmp(&ca).unwrap().then(a.cmp(&b))
    });
    let mut gt_taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for &d in &order {
        let mut best_g = usize::MAX;
        let mut best_iou = -1.0;
        for (g, gt) in gts.iter().enumerate() {
            if gt_taken[g]
                || gt.image_id != dets[d].image_id
                || gt.category_id != dets[d].category_id
            {
                continue;
            }
            let ov = oracle_iou(&dets[d].bbox, &gt.bbox);
            if ov >= tau && ov > best_iou {
                best_iou = ov;
                best_g = g;
            }
        }
        if best_g != usize::MAX {
            gt_taken[best_g] = true;
            tp[d] = true;
        }
    }
    tp
}

/// Definition-level 101-point interpolated AP: for each recall level,
/// scan every ranked prefix for the maximum precision whose recall
/// reaches the level. O(n * 101), no envelope trick.
pub fn reference_ap(labels: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || labels.is_empty() {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(labels.len());
    let mut recalls = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    for (k, &is_tp) in labels.iter().enumerate() {
        tp += is_tp as usize;
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    let mut total = 0.0;
    for level in 0..=100 {
        let r = level as f64 / 100.0;
        let mut best = 0.0f64;
        for (p, rc) in precisions.iter().zip(&recalls) {
            if *rc >= r && *p > best {
                best = *p;
            }
        }
        total += best;
    }
    total / 101.0
}

/// Category-averaged AP at one threshold, assembled purely from the
/// brute-force matcher and the reference AP.
pub fn bruteforce_ap_at(dets: &[Detection], gts: &[GroundTruthObject], tau: f64) -> f64 {
    let mut categories: Vec<i64> = gts.iter().map(|g| g.category_id).collect();
    categories.sort_unstable();
    categories.dedup();
    let tp = bruteforce_match(dets, gts, tau);
    let mut aps = Vec::new();
    for &cat in &categories {
        let n_gt = gts.iter().filter(|g| g.category_id == cat).count();
        if n_gt == 0 {
            continue;
        }
        let mut pool: Vec<usize> = (0..dets.len())
            .filter(|&d| dets[d].category_id == cat)
            .collect();
        pool.sort_by(|&a, &b| {
            let ca = dets[a].confidence.unwrap_or(dets[a].score);
            let cb = dets[b].confidence.unwrap_or(dets[b].score);
            cb.partial_cmp(&ca).unwrap().then(a.cmp(&b))
        });
        let labels: Vec<bool> = pool.into_iter().map(|d| tp[d]).collect();
        aps.push(reference_ap(&labels, n_gt));
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub fn random_instance(
    rng: &mut ChaCha8Rng,
    max_dets: usize,
    max_gts: usize,
    max_categories: i64,
) -> (Vec<Detection>, Vec<GroundTruthObject>) {
    let boxgen = |rng: &mut ChaCha8Rng| {
        let x1: f64 = rng.gen_range(0.0..80.0);
        let y1: f64 = rng.gen_range(0.0..80.0);
        BBox::new(x1, y1, x1 + rng.gen_range(2.0..40.0), y1 + rng.gen_range(2.0..40.0))
    };
    let n_dets = rng.gen_range(0..=max_dets);
    let n_gts = rng.gen_range(0..=max_gts);
    let n_images = rng.gen_range(1..=2i64);
    let gts: Vec<GroundTruthObject> = (0..n_gts)
        .map(|_| GroundTruthObject {
            image_id: rng.gen_range(0..n_images),
            category_id: rng.gen_range(0..max_categories),
            bbox: boxgen(rng),
        })
        .collect();
    let dets: Vec<Detection> = (0..n_dets)
        .map(|_| {
            // Half the detections hover near a ground truth so matches at
            // varied thresholds actually occur.
            let bbox = if !gts.is_empty() && rng.gen_bool(0.5) {
                let g = &gts[rng.gen_range(0..gts.len())].bbox;
                let jitter = rng.gen_range(0.0..6.0);
                let xs = [
                    g.x1 + rng.gen_range(-jitter..=jitter),
                    g.x2 + rng.gen_range(-jitter..=jitter),
                ];
                let ys = [
                    g.y1 + rng.gen_range(-jitter..=jitter),
                    g.y2 + rng.gen_range(-jitter..=jitter),
                ];
                BBox::new(
                    xs[0].min(xs[1]),
                    ys[0].min(ys[1]),
                    xs[0].max(xs[1]),
                    ys[0].max(ys[1]),
                )
            } else {
                boxgen(rng)
            };
            let image_id = if gts.is_empty() {
                rng.gen_range(0..n_images)
            } else {
                gts[rng.gen_range(0..gts.len())].image_id
            };
            let score = rng.gen_range(0.0..1.0);
            Detection {
                image_id,
                category_id: rng.gen_range(0..max_categories),
                bbox,
                score,
                predicted_iou: None,
                confidence: Some(score),
            }
        })
        .collect();
    (dets, gts)
}
