//! Axis-aligned boxes, IoU, and anchor offset encoding.
//!
//! Boxes live in continuous image coordinates with the corner convention
//! `(x1, y1, x2, y2)`, `x1 <= x2` and `y1 <= y2`. IoU on continuous
//! rectangles is exact, so there is no +1 pixel ambiguity anywhere in the
//! crate.

use core::fmt;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle in continuous image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Encoded regression offsets: center deltas normalized by anchor size and
/// log width/height ratios. All variance scalers are 1.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RegressionOffsets {
    pub d_cx: f64,
    pub d_cy: f64,
    pub d_w: f64,
    pub d_h: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeometryError {
    /// Anchor (or encode target) has zero or negative extent.
    DegenerateBox,
    /// Coordinates violate `x1 <= x2 && y1 <= y2` or are non-finite.
    InvalidBox,
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::DegenerateBox => write!(f, "box has zero width or height"),
            GeometryError::InvalidBox => write!(f, "box coordinates are invalid"),
        }
    }
}

impl core::error::Error for GeometryError {}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x1 <= x2 && y1 <= y2, "corner convention violated");
        Self { x1, y1, x2, y2 }
    }

    /// Validating constructor; rejects non-finite or inverted coordinates.
    pub fn try_new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 > x2 || y1 > y2 {
            return Err(GeometryError::InvalidBox);
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x1.is_finite()
            && self.y1.is_finite()
            && self.x2.is_finite()
            && self.y2.is_finite()
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    /// Positive width and height.
    pub fn is_non_degenerate(&self) -> bool {
        self.is_valid() && self.width() > 0.0 && self.height() > 0.0
    }

    /// Intersection of this box with `bounds`, clamping each coordinate.
    /// Returns a degenerate box on the boundary when the box lies outside.
    pub fn clip(&self, bounds: &BBox) -> BBox {
        BBox {
            x1: self.x1.clamp(bounds.x1, bounds.x2),
            y1: self.y1.clamp(bounds.y1, bounds.y2),
            x2: self.x2.clamp(bounds.x1, bounds.x2),
            y2: self.y2.clamp(bounds.y1, bounds.y2),
        }
    }
}

/// Intersection over union of two boxes. Returns 0 when the union has zero
/// area (two degenerate boxes), so the result is always in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Gradient of `iou(pred, gt)` with respect to the four coordinates of
/// `pred`, as `[d/dx1, d/dy1, d/dx2, d/dy2]`.
///
/// Uses the piecewise-analytic derivative of the intersection and union
/// areas. Where the intersection is empty the IoU is constant 0 and the
/// subgradient `[0, 0, 0, 0]` is returned.
pub fn iou_gradient(pred: &BBox, gt: &BBox) -> [f64; 4] {
    let ix1 = pred.x1.max(gt.x1);
    let iy1 = pred.y1.max(gt.y1);
    let ix2 = pred.x2.min(gt.x2);
    let iy2 = pred.y2.min(gt.y2);
    let iw = ix2 - ix1;
    let ih = iy2 - iy1;
    if iw <= 0.0 || ih <= 0.0 {
        return [0.0; 4];
    }
    let inter = iw * ih;
    let union = pred.area() + gt.area() - inter;
    if union <= 0.0 {
        return [0.0; 4];
    }

    // dI/d(coord): a pred edge moves the intersection only when it is the
    // binding edge of the overlap region.
    let di = [
        if pred.x1 > gt.x1 { -ih } else { 0.0 },
        if pred.y1 > gt.y1 { -iw } else { 0.0 },
        if pred.x2 < gt.x2 { ih } else { 0.0 },
        if pred.y2 < gt.y2 { iw } else { 0.0 },
    ];
    let pw = pred.width();
    let ph = pred.height();
    let da = [-ph, -pw, ph, pw];

    let mut grad = [0.0; 4];
    for k in 0..4 {
        let du = da[k] - di[k];
        grad[k] = (di[k] * union - inter * du) / (union * union);
    }
    grad
}

/// Encodes `target` relative to `anchor` using the standard center/log-size
/// parameterization. Both boxes must be non-degenerate.
pub fn encode(anchor: &BBox, target: &BBox) -> Result<RegressionOffsets, GeometryError> {
    if !anchor.is_non_degenerate() || !target.is_non_degenerate() {
        return Err(GeometryError::DegenerateBox);
    }
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    let aw = anchor.width();
    let ah = anchor.height();
    Ok(RegressionOffsets {
        d_cx: (tcx - acx) / aw,
        d_cy: (tcy - acy) / ah,
        d_w: libm::log(target.width() / aw),
        d_h: libm::log(target.height() / ah),
    })
}

/// Inverse of [`encode`]: applies `offsets` to `anchor`.
pub fn decode(anchor: &BBox, offsets: &RegressionOffsets) -> Result<BBox, GeometryError> {
    if !anchor.is_non_degenerate() {
        return Err(GeometryError::DegenerateBox);
    }
    let (acx, acy) = anchor.center();
    let cx = acx + offsets.d_cx * anchor.width();
    let cy = acy + offsets.d_cy * anchor.height();
    let w = anchor.width() * libm::exp(offsets.d_w);
    let h = anchor.height() * libm::exp(offsets.d_h);
    Ok(BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rasterized pixel-count IoU on a fine grid. Independent of `iou`.
    fn raster_iou(a: &BBox, b: &BBox, n: usize) -> f64 {
        let lo_x = a.x1.min(b.x1) - 0.5;
        let hi_x = a.x2.max(b.x2) + 0.5;
        let lo_y = a.y1.min(b.y1) - 0.5;
        let hi_y = a.y2.max(b.y2) + 0.5;
        let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
        for i in 0..n {
            let x = lo_x + (i as f64 + 0.5) * (hi_x - lo_x) / n as f64;
            for j in 0..n {
                let y = lo_y + (j as f64 + 0.5) * (hi_y - lo_y) / n as f64;
                let ina = x >= a.x1 && x <= a.x2 && y >= a.y1 && y <= a.y2;
                let inb = x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2;
                na += ina as u64;
                nb += inb as u64;
                inter += (ina && inb) as u64;
            }
        }
        let union = na + nb - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    fn fd_iou_gradient(pred: &BBox, gt: &BBox, step: f64) -> [f64; 4] {
        let mut g = [0.0; 4];
        for k in 0..4 {
            let mut hi = *pred;
            let mut lo = *pred;
            match k {
                0 => {
                    hi.x1 += step;
                    lo.x1 -= step;
                }
                1 => {
                    hi.y1 += step;
                    lo.y1 -= step;
                }
                2 => {
                    hi.x2 += step;
                    lo.x2 -= step;
                }
                _ => {
                    hi.y2 += step;
                    lo.y2 -= step;
                }
            }
            g[k] = (iou(&hi, gt) - iou(&lo, gt)) / (2.0 * step);
        }
        g
    }

    fn rand_box(rng: &mut impl Rng) -> BBox {
        let x1: f64 = rng.gen_range(-5.0..5.0);
        let y1: f64 = rng.gen_range(-5.0..5.0);
        let w: f64 = rng.gen_range(0.2..6.0);
        let h: f64 = rng.gen_range(0.2..6.0);
        BBox::new(x1, y1, x1 + w, y1 + h)
    }

    #[test]
    fn iou_identity_is_one() {
        let b = BBox::new(1.0, 2.0, 4.0, 7.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_matches_raster_oracle() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        let got = iou(&a, &b);
        assert!((got - 1.0 / 7.0).abs() < 1e-12);
        assert!((got - raster_iou(&a, &b, 1000)).abs() < 1e-3);
    }

    #[test]
    fn iou_of_two_degenerate_boxes_is_zero() {
        let a = BBox::new(1.0, 1.0, 1.0, 1.0);
        let b = BBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_symmetry_and_bounds_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let a = rand_box(&mut rng);
            let b = rand_box(&mut rng);
            let ab = iou(&a, &b);
            assert_eq!(ab, iou(&b, &a));
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn iou_one_iff_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let a = rand_box(&mut rng);
            let mut b = a;
            b.x2 += 0.01;
            assert!(iou(&a, &b) < 1.0);
        }
    }

    #[test]
    fn gradient_zero_when_disjoint() {
        let pred = BBox::new(0.0, 0.0, 1.0, 1.0);
        let gt = BBox::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou_gradient(&pred, &gt), [0.0; 4]);
    }

    #[test]
    fn gradient_matches_finite_differences_fixed_case() {
        let pred = BBox::new(0.0, 0.0, 2.0, 2.0);
        let gt = BBox::new(1.0, 1.0, 3.0, 3.0);
        let ana = iou_gradient(&pred, &gt);
        let num = fd_iou_gradient(&pred, &gt, 1e-6);
        for k in 0..4 {
            assert!(
                (ana[k] - num[k]).abs() < 1e-5,
                "component {k}: {} vs {}",
                ana[k],
                num[k]
            );
        }
    }

    #[test]
    fn gradient_at_equality_shrinks_iou() {
        // pred == gt sits on the boundary set where the derivative is
        // one-sided; the subgradient convention picks the outward side, so
        // compare against one-sided differences taken outward.
        let b = BBox::new(1.0, 1.0, 4.0, 3.0);
        let ana = iou_gradient(&b, &b);
        let h = 1e-7;
        let sided = [
            (iou(&b, &b) - iou(&BBox::new(b.x1 - h, b.y1, b.x2, b.y2), &b)) / h,
            (iou(&b, &b) - iou(&BBox::new(b.x1, b.y1 - h, b.x2, b.y2), &b)) / h,
            (iou(&BBox::new(b.x1, b.y1, b.x2 + h, b.y2), &b) - iou(&b, &b)) / h,
            (iou(&BBox::new(b.x1, b.y1, b.x2, b.y2 + h), &b) - iou(&b, &b)) / h,
        ];
        for k in 0..4 {
            assert!(
                (ana[k] - sided[k]).abs() < 1e-5,
                "component {k}: {} vs {}",
                ana[k],
                sided[k]
            );
        }
        // Any perturbation away from the optimum reduces IoU.
        for delta in [
            BBox::new(b.x1 - 0.05, b.y1, b.x2, b.y2),
            BBox::new(b.x1 + 0.05, b.y1, b.x2, b.y2),
            BBox::new(b.x1, b.y1, b.x2 + 0.05, b.y2),
            BBox::new(b.x1, b.y1 - 0.05, b.x2, b.y2),
        ] {
            assert!(iou(&delta, &b) < 1.0);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut checked = 0;
        while checked < 300 {
            let pred = rand_box(&mut rng);
            let gt = rand_box(&mut rng);
            // Skip near the measure-zero boundary set: coinciding edges or
            // an almost-empty intersection make the FD stencil straddle a kink.
            let near_edge = [
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
            if near_edge {
                continue;
            }
            let ana = iou_gradient(&pred, &gt);
            let num = fd_iou_gradient(&pred, &gt, 1e-6);
            for k in 0..4 {
                assert!(
                    (ana[k] - num[k]).abs() < 1e-5,
                    "pred {pred:?} gt {gt:?} k={k}: {} vs {}",
                    ana[k],
                    num[k]
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn encode_self_is_zero() {
        let a = BBox::new(2.0, 3.0, 6.0, 9.0);
        let off = encode(&a, &a).unwrap();
        assert_eq!(off, RegressionOffsets { d_cx: 0.0, d_cy: 0.0, d_w: 0.0, d_h: 0.0 });
    }

    #[test]
    fn decode_identity_offsets() {
        let a = BBox::new(2.0, 3.0, 6.0, 9.0);
        let out = decode(&a, &RegressionOffsets { d_cx: 0.0, d_cy: 0.0, d_w: 0.0, d_h: 0.0 }).unwrap();
        assert!((out.x1 - a.x1).abs() < 1e-12);
        assert!((out.y1 - a.y1).abs() < 1e-12);
        assert!((out.x2 - a.x2).abs() < 1e-12);
        assert!((out.y2 - a.y2).abs() < 1e-12);
    }

    #[test]
    fn encode_rejects_degenerate_anchor() {
        let a = BBox::new(1.0, 1.0, 1.0, 2.0);
        let t = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(encode(&a, &t), Err(GeometryError::DegenerateBox));
        assert_eq!(
            decode(&a, &RegressionOffsets { d_cx: 0.0, d_cy: 0.0, d_w: 0.0, d_h: 0.0 }),
            Err(GeometryError::DegenerateBox)
        );
    }

    #[test]
    fn round_trip_relative_error_below_1e9() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let anchor = rand_box(&mut rng);
            let target = rand_box(&mut rng);
            let off = encode(&anchor, &target).unwrap();
            let back = decode(&anchor, &off).unwrap();
            let coords = [
                (back.x1, target.x1),
                (back.y1, target.y1),
                (back.x2, target.x2),
                (back.y2, target.y2),
            ];
            for (got, want) in coords {
                let rel = (got - want).abs() / want.abs().max(1.0);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-9, "worst relative error {worst}");
    }

    #[test]
    fn clip_stays_inside_bounds() {
        let bounds = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(-2.0, 3.0, 12.0, 15.0);
        let c = b.clip(&bounds);
        assert_eq!(c, BBox::new(0.0, 3.0, 10.0, 10.0));
        let outside = BBox::new(20.0, 20.0, 30.0, 30.0);
        let co = outside.clip(&bounds);
        assert!(co.is_valid());
        assert_eq!(co.area(), 0.0);
        let sorted: Vec<f64> = [co.x1, co.x2].to_vec();
        assert!(sorted[0] <= sorted[1]);
    }
}
