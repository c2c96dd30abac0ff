//! Training targets and the detection loss: sigmoid focal loss on the class
//! map plus smooth-L1 box regression at positive cells, both normalized by
//! the number of objects in the scene.

use crate::error::{Error, Result};
use crate::harness::detector::{DetectorConfig, REG_CHANNELS};
use crate::harness::scene::{Scene, NUM_CLASSES};
use crate::qat::Objective;
use crate::tensor::Tensor;

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// One positive cell: the object centre's cell on the head map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub row: usize,
    pub col: usize,
    pub class: usize,
    /// `dx, dy, ln(w / cell), ln(h / cell)`.
    pub reg: [f32; REG_CHANNELS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionTargets {
    pub grid: [usize; 2],
    pub positives: Vec<Positive>,
}

impl DetectionTargets {
    pub fn from_scene(scene: &Scene, cfg: &DetectorConfig) -> Result<Self> {
        let grid = cfg.output_grid();
        let [sy, sx] = cfg.output_cell();
        let mut positives: Vec<Positive> = Vec::with_capacity(scene.boxes.len());
        for b in &scene.boxes {
            let (fc, fr) = (b.cx / sx, b.cy / sy);
            let (col, row) = (fc.floor(), fr.floor());
            if !(col >= 0.0 && row >= 0.0 && (col as usize) < grid[1] && (row as usize) < grid[0]) {
                return Err(Error::invalid(format!("box centre ({}, {}) lies outside the head map", b.cx, b.cy)));
            }
            let (row, col) = (row as usize, col as usize);
            if positives.iter().any(|p| p.row == row && p.col == col) {
                return Err(Error::invalid(format!("two boxes share head cell ({row}, {col})")));
            }
            positives.push(Positive {
                row,
                col,
                class: b.class,
                reg: [fc - col as f32 - 0.5, fr - row as f32 - 0.5, (b.w / sx).ln(), (b.h / sy).ln()],
            });
        }
        Ok(Self { grid, positives })
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Focal loss of one logit and its derivative with respect to the logit.
pub fn focal(z: f64, positive: bool) -> (f64, f64) {
    let (g, a) = (FOCAL_GAMMA, FOCAL_ALPHA);
    let p = 1.0 / (1.0 + (-z).exp());
    if positive {
        let log_p = -softplus(-z);
        let q = 1.0 - p;
        (-a * q.powf(g) * log_p, a * (g * p * q.powf(g) * log_p - q.powf(g + 1.0)))
    } else {
        let log_q = -softplus(z);
        (
            -(1.0 - a) * p.powf(g) * log_q,
            (1.0 - a) * (-g * (1.0 - p) * p.powf(g) * log_q + p.powf(g + 1.0)),
        )
    }
}

pub fn smooth_l1(d: f64) -> (f64, f64) {
    let b = SMOOTH_L1_BETA;
    if d.abs() < b {
        (0.5 * d * d / b, d / b)
    } else {
        (d.abs() - 0.5 * b, d.signum())
    }
}

pub struct DetectionObjective {
    pub targets: Vec<DetectionTargets>,
    pub cls_weight: f64,
    pub reg_weight: f64,
}

impl DetectionObjective {
    pub fn new(scenes: &[Scene], cfg: &DetectorConfig, cls_weight: f32, reg_weight: f32) -> Result<Self> {
        Ok(Self {
            targets: scenes.iter().map(|s| DetectionTargets::from_scene(s, cfg)).collect::<Result<_>>()?,
            cls_weight: cls_weight as f64,
            reg_weight: reg_weight as f64,
        })
    }
}

impl Objective for DetectionObjective {
    fn num_samples(&self) -> usize {
        self.targets.len()
    }

    fn loss_and_grad(&self, index: usize, output: &Tensor) -> Result<(f64, Tensor)> {
        let t = self
            .targets
            .get(index)
            .ok_or_else(|| Error::invalid(format!("sample {index} out of range")))?;
        let [h, w] = t.grid;
        if output.shape() != [1, NUM_CLASSES + REG_CHANNELS, h, w] {
            return Err(Error::shape(
                "detection loss",
                format!("expected [1, {}, {h}, {w}], got {:?}", NUM_CLASSES + REG_CHANNELS, output.shape()),
            ));
        }
        let plane = h * w;
        let norm = t.positives.len().max(1) as f64;
        let out = output.data();
        let mut grad = vec![0.0f32; out.len()];
        let mut is_pos = vec![false; NUM_CLASSES * plane];
        for p in &t.positives {
            is_pos[p.class * plane + p.row * w + p.col] = true;
        }
        let mut cls_loss = 0.0;
        for (i, &pos) in is_pos.iter().enumerate() {
            let (l, g) = focal(out[i] as f64, pos);
            cls_loss += l;
            grad[i] = (self.cls_weight * g / norm) as f32;
        }
        let mut reg_loss = 0.0;
        for p in &t.positives {
            for (k, &target) in p.reg.iter().enumerate() {
                let at = (NUM_CLASSES + k) * plane + p.row * w + p.col;
                let (l, g) = smooth_l1(out[at] as f64 - target as f64);
                reg_loss += l;
                grad[at] = (self.reg_weight * g / norm) as f32;
            }
        }
        let loss = (self.cls_weight * cls_loss + self.reg_weight * reg_loss) / norm;
        Ok((loss, Tensor::new(output.shape().to_vec(), grad)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::{generate_dataset, DatasetConfig, Difficulty, GtBox};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn focal_gradient_matches_central_difference(z in -8.0f64..8.0, positive: bool) {
            let h = 1e-5;
            let fd = (focal(z + h, positive).0 - focal(z - h, positive).0) / (2.0 * h);
            let g = focal(z, positive).1;
            prop_assert!((fd - g).abs() <= 1e-6 * (1.0 + g.abs()), "{fd} vs {g}");
        }
    }

    #[test]
    fn focal_reference_values() {
        // p = 0.5: loss = α · 0.25 · ln 2 for a positive
        let (l, _) = focal(0.0, true);
        assert!((l - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(focal(-800.0, true).0.is_finite());
        assert!(focal(800.0, false).0.is_finite());
    }

    #[test]
    fn targets_invert_the_decoder() {
        let cfg = DetectorConfig::default();
        let b = GtBox {
            cx: 5.3,
            cy: 9.9,
            w: 3.0,
            h: 1.5,
            class: 2,
            difficulty: Difficulty::Easy,
            points: 30,
        };
        let s = Scene {
            points: vec![],
            boxes: vec![b],
        };
        let t = DetectionTargets::from_scene(&s, &cfg).unwrap();
        let p = t.positives[0];
        let [sy, sx] = cfg.output_cell();
        assert_eq!((p.row, p.col), (4, 2));
        assert!(((p.col as f32 + 0.5 + p.reg[0]) * sx - b.cx).abs() < 1e-5);
        assert!(((p.row as f32 + 0.5 + p.reg[1]) * sy - b.cy).abs() < 1e-5);
        assert!((sx * p.reg[2].exp() - b.w).abs() < 1e-5);
        assert!((sy * p.reg[3].exp() - b.h).abs() < 1e-5);
    }

    #[test]
    fn generated_scenes_have_distinct_positive_cells() {
        let cfg = DetectorConfig::default();
        let scenes = generate_dataset(&DatasetConfig { size: 200, ..DatasetConfig::default() }, 3).unwrap();
        assert!(DetectionObjective::new(&scenes, &cfg, 1.0, 2.0).is_ok());
    }

    #[test]
    fn loss_gradient_matches_finite_difference() {
        let cfg = DetectorConfig::default();
        let scenes = generate_dataset(&DatasetConfig { size: 1, ..DatasetConfig::default() }, 8).unwrap();
        let obj = DetectionObjective::new(&scenes, &cfg, 1.0, 2.0).unwrap();
        let shape = [1, NUM_CLASSES + REG_CHANNELS, 8, 8];
        let out = Tensor::from_fn(&shape, |i| ((i * 37 % 101) as f32 / 101.0 - 0.5) * 6.0);
        let (_, g) = obj.loss_and_grad(0, &out).unwrap();
        let p = obj.targets[0].positives[0];
        let probes = [p.class * 64 + p.row * 8 + p.col, 5, (NUM_CLASSES + 2) * 64 + p.row * 8 + p.col];
        for at in probes {
            let h = 1e-2f32;
            let mut up = out.clone();
            up.data_mut()[at] += h;
            let mut dn = out.clone();
            dn.data_mut()[at] -= h;
            let fd = (obj.loss_and_grad(0, &up).unwrap().0 - obj.loss_and_grad(0, &dn).unwrap().0) / (2.0 * h as f64);
            let an = g.data()[at] as f64;
            assert!((fd - an).abs() < 1e-3 * (1.0 + an.abs()), "at {at}: {fd} vs {an}");
        }
        assert!(obj.loss_and_grad(0, &Tensor::zeros(&[1, 7, 4, 4])).is_err());
    }
}
