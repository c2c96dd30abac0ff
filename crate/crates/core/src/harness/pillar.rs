//! Grouping of scene points into vertical pillars on a square grid.

use serde::{Deserialize, Serialize};

use crate::graph::PillarBatch;
use crate::harness::scene::Scene;
use crate::tensor::Tensor;

/// `x, y, intensity, x − x̄, y − ȳ, x − x_pillar, y − y_pillar`, unscaled.
/// `x, y` are in the sensor frame, so one input tensor mixes positions tens
/// of units from the origin with sub-pillar offsets and unit intensities.
pub const POINT_FEATURES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PillarConfig {
    /// `[rows, cols]`.
    pub grid: [usize; 2],
    pub field: f32,
    pub max_points: usize,
    /// Sensor-frame position of the field corner `(0, 0)`.
    pub origin: [f32; 2],
}

impl Default for PillarConfig {
    fn default() -> Self {
        Self {
            grid: [16, 16],
            field: 16.0,
            max_points: 8,
            origin: [40.0, -8.0],
        }
    }
}

impl PillarConfig {
    pub fn pillar_size(&self) -> [f32; 2] {
        [self.field / self.grid[0] as f32, self.field / self.grid[1] as f32]
    }
}

/// Pillars sorted by `(row, col)`. Each keeps its first `max_points` points
/// by point index; `x̄, ȳ` are means over the kept points. Points outside the
/// field are dropped.
pub fn pillarize(scene: &Scene, cfg: &PillarConfig) -> PillarBatch {
    let [rows, cols] = cfg.grid;
    let [sy, sx] = cfg.pillar_size();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); rows * cols];
    for (i, p) in scene.points.iter().enumerate() {
        let (x, y) = (p[0], p[1]);
        if !(x >= 0.0 && x < cfg.field && y >= 0.0 && y < cfg.field) {
            continue;
        }
        let r = ((y / sy) as usize).min(rows - 1);
        let c = ((x / sx) as usize).min(cols - 1);
        let cell = &mut members[r * cols + c];
        if cell.len() < cfg.max_points {
            cell.push(i);
        }
    }
    let m = cfg.max_points;
    let mut coords = Vec::new();
    let mut counts = Vec::new();
    let mut data = Vec::new();
    for (slot, idx) in members.iter().enumerate().filter(|(_, v)| !v.is_empty()) {
        let (r, c) = (slot / cols, slot % cols);
        let n = idx.len() as f32;
        let mx = idx.iter().map(|&i| scene.points[i][0]).sum::<f32>() / n;
        let my = idx.iter().map(|&i| scene.points[i][1]).sum::<f32>() / n;
        let (px, py) = ((c as f32 + 0.5) * sx, (r as f32 + 0.5) * sy);
        for &i in idx {
            let [x, y, intensity] = scene.points[i];
            data.extend_from_slice(&[
                x + cfg.origin[0],
                y + cfg.origin[1],
                intensity,
                x - mx,
                y - my,
                x - px,
                y - py,
            ]);
        }
        data.resize(data.len() + (m - idx.len()) * POINT_FEATURES, 0.0);
        coords.push((r, c));
        counts.push(idx.len());
    }
    let p = coords.len();
    PillarBatch {
        points: Tensor::new(vec![p * m, POINT_FEATURES], data).expect("rows match pillars"),
        counts,
        coords,
        max_points: m,
    }
}
