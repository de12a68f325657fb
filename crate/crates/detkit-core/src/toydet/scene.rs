//! Procedural scenes: rectangles with category-dependent appearance
//! rendered onto a coarse feature grid, plus Gaussian pixel noise.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::evalmap::GroundTruthObject;
use crate::geometry::BBox;
use crate::rngutil::{log_uniform, normal};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SceneSpec {
    pub canvas_size: f64,
    pub grid_size: usize,
    pub n_categories: usize,
    pub gt_per_scene: (usize, usize),
    /// Log-uniform range of object widths.
    pub gt_size_range: (f64, f64),
    /// Log-uniform range of height/width ratios (heights stay clamped to
    /// the size range).
    pub gt_aspect_range: (f64, f64),
    /// Std-dev of the Gaussian noise added to every feature channel.
    pub pixel_noise: f64,
    /// How much of a category's appearance bleeds into the next channel;
    /// keeps classification learnable but imperfect.
    pub appearance_bleed: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            canvas_size: 64.0,
            grid_size: 8,
            n_categories: 3,
            gt_per_scene: (1, 3),
            gt_size_range: (11.0, 24.0),
            gt_aspect_range: (0.8, 1.25),
            pixel_noise: 0.08,
            appearance_bleed: 0.3,
        }
    }
}

impl SceneSpec {
    /// Feature channels: one per category, an occupancy channel, and two
    /// geometry channels carrying the occupancy-weighted offset of the
    /// covering object's center (in cell units).
    pub fn n_channels(&self) -> usize {
        self.n_categories + 3
    }

    /// Per-anchor input dimension: a 3x3 cell neighborhood.
    pub fn feature_dim(&self) -> usize {
        9 * self.n_channels()
    }

    pub fn cell_size(&self) -> f64 {
        self.canvas_size / self.grid_size as f64
    }
}

/// One rendered scene: ground truths plus the feature grid they were
/// rasterized onto.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyScene {
    pub image_id: i64,
    pub gts: Vec<GroundTruthObject>,
    grid_size: usize,
    n_channels: usize,
    /// Row-major `[cell][channel]`.
    features: Vec<f64>,
}

impl ToyScene {
    /// Renders a scene. Placement, appearance, and noise all come from the
    /// caller's RNG stream, so rendering is deterministic per seed.
    pub fn render(image_id: i64, spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Self {
        let n_gt = rng.gen_range(spec.gt_per_scene.0..=spec.gt_per_scene.1);
        let mut gts = Vec::with_capacity(n_gt);
        for _ in 0..n_gt {
            let w = log_uniform(rng, spec.gt_size_range.0, spec.gt_size_range.1);
            let aspect = log_uniform(rng, spec.gt_aspect_range.0, spec.gt_aspect_range.1);
            let h = (w * aspect).clamp(spec.gt_size_range.0, spec.gt_size_range.1);
            let cx = rng.gen_range(0.5 * w..=spec.canvas_size - 0.5 * w);
            let cy = rng.gen_range(0.5 * h..=spec.canvas_size - 0.5 * h);
            gts.push(GroundTruthObject {
                image_id,
                category_id: rng.gen_range(0..spec.n_categories) as i64,
                bbox: BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h),
            });
        }

        let n_channels = spec.n_channels();
        let cell = spec.cell_size();
        let mut features = vec![0.0; spec.grid_size * spec.grid_size * n_channels];
        for gt in &gts {
            let cat = gt.category_id as usize;
            for cy in 0..spec.grid_size {
                for cx in 0..spec.grid_size {
                    let cell_box = BBox::new(
                        cx as f64 * cell,
                        cy as f64 * cell,
                        (cx + 1) as f64 * cell,
                        (cy + 1) as f64 * cell,
                    );
                    let ix = (gt.bbox.x2.min(cell_box.x2) - gt.bbox.x1.max(cell_box.x1)).max(0.0);
                    let iy = (gt.bbox.y2.min(cell_box.y2) - gt.bbox.y1.max(cell_box.y1)).max(0.0);
                    let frac = ix * iy / cell_box.area();
                    if frac > 0.0 {
                        let base = (cy * spec.grid_size + cx) * n_channels;
                        features[base + cat] += frac;
                        features[base + (cat + 1) % spec.n_categories] +=
                            spec.appearance_bleed * frac;
                        features[base + n_channels - 3] += frac;
                        // Occupancy-weighted offset of the object center
                        // from the cell center, in cell units.
                        let (gcx, gcy) = gt.bbox.center();
                        let (ccx, ccy) = cell_box.center();
                        features[base + n_channels - 2] += frac * (gcx - ccx) / cell;
                        features[base + n_channels - 1] += frac * (gcy - ccy) / cell;
                    }
                }
            }
        }
        for value in &mut features {
            *value += spec.pixel_noise * normal(rng);
        }

        Self { image_id, gts, grid_size: spec.grid_size, n_channels, features }
    }

    /// 3x3 neighborhood of the given cell, zero-padded at the border and
    /// flattened to `9 * n_channels` values.
    pub fn anchor_features(&self, cell_x: usize, cell_y: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(9 * self.n_channels);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let x = cell_x as i64 + dx;
                let y = cell_y as i64 + dy;
                if x < 0 || y < 0 || x >= self.grid_size as i64 || y >= self.grid_size as i64 {
                    out.extend(core::iter::repeat(0.0).take(self.n_channels));
                } else {
                    let base = (y as usize * self.grid_size + x as usize) * self.n_channels;
                    out.extend_from_slice(&self.features[base..base + self.n_channels]);
                }
            }
        }
        out
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }
}

/// Square anchors on every grid cell: `positions x positions` sub-centers
/// per cell, one anchor per scale at each. Anchors are emitted cell-major,
/// then sub-position, then scale, matching the per-slot head layout.
pub fn anchor_grid(spec: &SceneSpec, scales: &[f64], positions: usize) -> Vec<BBox> {
    let cell = spec.cell_size();
    let mut anchors =
        Vec::with_capacity(spec.grid_size * spec.grid_size * positions * positions * scales.len());
    for cy in 0..spec.grid_size {
        for cx in 0..spec.grid_size {
            for py in 0..positions {
                for px in 0..positions {
                    let ax = (cx as f64 + (px as f64 + 0.5) / positions as f64) * cell;
                    let ay = (cy as f64 + (py as f64 + 0.5) / positions as f64) * cell;
                    for &s in scales {
                        anchors.push(BBox::new(
                            ax - 0.5 * s,
                            ay - 0.5 * s,
                            ax + 0.5 * s,
                            ay + 0.5 * s,
                        ));
                    }
                }
            }
        }
    }
    anchors
}

/// Renders `n` scenes with consecutive image ids from the given stream.
pub fn make_scenes(
    rng: &mut ChaCha8Rng,
    n: usize,
    spec: &SceneSpec,
    first_image_id: i64,
) -> Vec<ToyScene> {
    (0..n)
        .map(|i| ToyScene::render(first_image_id + i as i64, spec, rng))
        .collect()
}
