//! Finite-difference gates behind `detkit grad-check`.
//!
//! Each gate compares an analytic gradient against central finite
//! differences of the quantity it claims to differentiate and reports a
//! maximum error against a fixed tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use detkit_core::geometry::{decode, encode, iou, iou_gradient, BBox};
use detkit_core::losses::{
    bce, bce_grad_wrt_pred, focal_term, focal_term_grad, iou_bce_grad_wrt_target, smooth_l1_term,
    smooth_l1_term_grad, FocalParams,
};
use detkit_core::toydet::{
    backward, loss_value, target_ious, SceneSpec, ToyModelParams, ToyScene, TrainConfig,
};

#[derive(Debug, Clone)]
pub struct GateResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl GateResult {
    fn from_max_err(name: &'static str, max_err: f64, tolerance: f64) -> Self {
        GateResult {
            name,
            passed: max_err <= tolerance,
            detail: format!("max error {max_err:.3e} (tolerance {tolerance:.0e})"),
        }
    }
}

fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
    let x1: f64 = rng.gen_range(-5.0..5.0);
    let y1: f64 = rng.gen_range(-5.0..5.0);
    BBox::new(x1, y1, x1 + rng.gen_range(0.2..6.0), y1 + rng.gen_range(0.2..6.0))
}

pub fn geometry_gates(seed: u64) -> Vec<GateResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let anchor = rand_box(&mut rng);
        let target = rand_box(&mut rng);
        let off = encode(&anchor, &target).unwrap();
        let back = decode(&anchor, &off).unwrap();
        for (got, want) in [
            (back.x1, target.x1),
            (back.y1, target.y1),
            (back.x2, target.x2),
            (back.y2, target.y2),
        ] {
            worst = worst.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    results.push(GateResult::from_max_err("geometry.encode_decode_round_trip", worst, 1e-9));

    let step = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 1000 {
        let pred = rand_box(&mut rng);
        let gt = rand_box(&mut rng);
        let near_boundary = [
            pred.x1 - gt.x1,
            pred.y1 - gt.y1,
            pred.x2 - gt.x2,
            pred.y2 - gt.y2,
            pred.x1 - gt.x2,
            pred.x2 - gt.x1,
            pred.y1 - gt.y2,
            pred.y2 - gt.y1,
        ]
        .iter()
        .any(|d| d.abs() < 1e-4);
        if near_boundary {
            continue;
        }
        let analytic = iou_gradient(&pred, &gt);
        for k in 0..4 {
            let mut hi = pred;
            let mut lo = pred;
            let (h, l) = match k {
                0 => (&mut hi.x1, &mut lo.x1),
                1 => (&mut hi.y1, &mut lo.y1),
                2 => (&mut hi.x2, &mut lo.x2),
                _ => (&mut hi.y2, &mut lo.y2),
            };
            *h += step;
            *l -= step;
            let numeric = (iou(&hi, &gt) - iou(&lo, &gt)) / (2.0 * step);
            worst = worst.max((analytic[k] - numeric).abs());
        }
        checked += 1;
    }
    results.push(GateResult::from_max_err("geometry.iou_gradient_vs_fd", worst, 1e-5));

    results
}

pub fn losses_gates(seed: u64) -> Vec<GateResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let step = 1e-6;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-3);

    // Eq-3-2 family: BCE gradient in the target at 1000 interior points.
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p: f64 = rng.gen_range(0.01..0.99);
        let t: f64 = rng.gen_range(0.01..0.99);
        let analytic = iou_bce_grad_wrt_target(p).unwrap();
        let numeric = (bce(p, t + step) - bce(p, t - step)) / (2.0 * step);
        worst = worst.max((analytic - numeric).abs());
    }
    let exact_zero = iou_bce_grad_wrt_target(0.5).unwrap() == 0.0;
    let mut gate = GateResult::from_max_err("losses.bce_grad_wrt_target_vs_fd", worst, 1e-6);
    if !exact_zero {
        gate.passed = false;
        gate.detail.push_str("; value at 0.5 is not exactly zero");
    }
    results.push(gate);

    let params = FocalParams::default();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p: f64 = rng.gen_range(0.01..0.99);
        let target = rng.gen_bool(0.5);
        let analytic = focal_term_grad(p, target, &params);
        let numeric =
            (focal_term(p + step, target, &params) - focal_term(p - step, target, &params))
                / (2.0 * step);
        worst = worst.max(rel(analytic, numeric));
    }
    results.push(GateResult::from_max_err("losses.focal_grad_vs_fd", worst, 1e-5));

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let beta: f64 = rng.gen_range(0.1..2.0);
        let mut x: f64 = rng.gen_range(-3.0..3.0);
        if (x.abs() - beta).abs() < 1e-4 {
            x += 0.01; // keep the stencil off the transition point
        }
        let analytic = smooth_l1_term_grad(x, beta);
        let numeric =
            (smooth_l1_term(x + step, beta) - smooth_l1_term(x - step, beta)) / (2.0 * step);
        worst = worst.max(rel(analytic, numeric));
    }
    results.push(GateResult::from_max_err("losses.smooth_l1_grad_vs_fd", worst, 1e-5));

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p: f64 = rng.gen_range(0.01..0.99);
        let t: f64 = rng.gen_range(0.0..=1.0);
        let analytic = bce_grad_wrt_pred(p, t);
        let numeric = (bce(p + step, t) - bce(p - step, t)) / (2.0 * step);
        worst = worst.max(rel(analytic, numeric));
    }
    results.push(GateResult::from_max_err("losses.bce_grad_wrt_pred_vs_fd", worst, 1e-5));

    results
}

fn toydet_gate_config() -> TrainConfig {
    TrainConfig {
        scene: SceneSpec {
            canvas_size: 16.0,
            grid_size: 2,
            n_categories: 2,
            gt_per_scene: (1, 2),
            gt_size_range: (5.0, 10.0),
            gt_aspect_range: (0.8, 1.25),
            pixel_noise: 0.05,
            appearance_bleed: 0.3,
        },
        anchor_scales: vec![7.0, 11.0],
        anchor_positions: 1,
        ..TrainConfig::default()
    }
}

/// Full-parameter finite-difference check on a small scene (8 anchors),
/// one gate per flag setting.
pub fn toydet_gates(seed: u64) -> Vec<GateResult> {
    let mut results = Vec::new();
    for (name, propagate) in [
        ("toydet.full_gradient_detached", false),
        ("toydet.full_gradient_propagated", true),
    ] {
        let mut cfg = toydet_gate_config();
        cfg.propagate_target_iou_gradient = propagate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = ToyScene::render(0, &cfg.scene, &mut rng);
        let mut params = ToyModelParams::zeros(cfg.layout());
        for v in &mut params.values {
            *v = rng.gen_range(-0.3..0.3);
        }
        backward(&mut params, &scene, &cfg).unwrap();
        let analytic = params.grads.clone();
        let frozen = if propagate {
            None
        } else {
            Some(target_ious(&params, &scene, &cfg).unwrap())
        };
        let step = 1e-5;
        let mut worst = 0.0f64;
        for k in 0..params.values.len() {
            let mut hi = params.clone();
            hi.values[k] += step;
            let mut lo = params.clone();
            lo.values[k] -= step;
            let numeric = (loss_value(&hi, &scene, &cfg, frozen.as_deref()).unwrap()
                - loss_value(&lo, &scene, &cfg, frozen.as_deref()).unwrap())
                / (2.0 * step);
            let denom = analytic[k].abs().max(numeric.abs()).max(1e-3);
            worst = worst.max((analytic[k] - numeric).abs() / denom);
        }
        results.push(GateResult::from_max_err(name, worst, 1e-4));
    }
    results
}

pub fn all_gates(seed: u64) -> Vec<GateResult> {
    let mut results = geometry_gates(seed);
    results.extend(losses_gates(seed));
    results.extend(toydet_gates(seed));
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_gates_pass() {
        for gate in all_gates(17) {
            assert!(gate.passed, "{}: {}", gate.name, gate.detail);
        }
    }
}
