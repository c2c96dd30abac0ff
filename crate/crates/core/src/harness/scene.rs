//! Synthetic top-down scenes: axis-aligned objects rendered as point
//! clusters, background clutter and rare heavy-tailed intensity outliers.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 3;

/// Classes differ in footprint and in mean point intensity.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["large", "long", "small"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub class: usize,
    pub difficulty: Difficulty,
    /// Points generated inside the box.
    pub points: usize,
}

impl GtBox {
    pub fn area(&self) -> f32 {
        self.w * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    /// `(x, y, intensity)`.
    pub points: Vec<[f32; 3]>,
    pub boxes: Vec<GtBox>,
}

/// easy: area ≥ `easy_area` and ≥ `easy_points`; hard: area < `hard_area`
/// or < `hard_points`; moderate otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DifficultyRule {
    pub easy_area: f32,
    pub easy_points: usize,
    pub hard_area: f32,
    pub hard_points: usize,
}

impl Default for DifficultyRule {
    fn default() -> Self {
        Self {
            easy_area: 7.0,
            easy_points: 30,
            hard_area: 4.0,
            hard_points: 12,
        }
    }
}

impl DifficultyRule {
    pub fn classify(&self, area: f32, points: usize) -> Difficulty {
        if area < self.hard_area || points < self.hard_points {
            Difficulty::Hard
        } else if area >= self.easy_area && points >= self.easy_points {
            Difficulty::Easy
        } else {
            Difficulty::Moderate
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub size: usize,
    /// Side of the square field; points live in `[0, field)²`.
    pub field: f32,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Per class `[short_min, short_max, long_min, long_max]`; the long
    /// side lies along x or y with equal probability.
    pub class_extent: [[f32; 4]; NUM_CLASSES],
    /// Object centres never share a cell of this size.
    pub target_cell: f32,
    /// Points per unit area of a fully visible object.
    pub point_density: f32,
    /// Visible fraction is drawn from `[min_visibility, 1]`.
    pub min_visibility: f32,
    pub clutter_points: usize,
    pub clutter_max_intensity: f32,
    pub class_intensity: [f32; NUM_CLASSES],
    pub intensity_std: f32,
    /// Probability that a scene carries one outlier point.
    pub outlier_rate: f64,
    /// Outlier intensity is `outlier_magnitude · U^(−1/outlier_alpha)`.
    pub outlier_magnitude: f32,
    pub outlier_alpha: f32,
    pub difficulty: DifficultyRule,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            size: 256,
            field: 16.0,
            min_objects: 2,
            max_objects: 5,
            class_extent: [[2.8, 3.4, 3.2, 4.0], [1.4, 1.9, 3.0, 4.0], [1.5, 2.0, 1.6, 2.4]],
            target_cell: 2.0,
            point_density: 6.0,
            min_visibility: 0.25,
            clutter_points: 30,
            clutter_max_intensity: 0.3,
            class_intensity: [0.35, 0.55, 0.75],
            intensity_std: 0.04,
            outlier_rate: 0.02,
            outlier_magnitude: 50.0,
            outlier_alpha: 1.5,
            difficulty: DifficultyRule::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(msg));
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return bad(format!("outlier_rate {} must lie in [0, 1]", self.outlier_rate));
        }
        if !(self.field > 0.0) || !(self.target_cell > 0.0) {
            return bad("field and target_cell must be positive".into());
        }
        for (k, e) in self.class_extent.iter().enumerate() {
            if !(e[0] > 0.0 && e[0] <= e[1] && e[2] > 0.0 && e[2] <= e[3] && e[1].max(e[3]) < self.field) {
                return bad(format!("class {k} extent {e:?} must be positive, ordered and below field {}", self.field));
            }
        }
        if self.min_objects > self.max_objects {
            return bad(format!("min_objects {} exceeds max_objects {}", self.min_objects, self.max_objects));
        }
        if !(self.point_density >= 0.0) || !(0.0..=1.0).contains(&self.min_visibility) {
            return bad("point_density must be non-negative and min_visibility in [0, 1]".into());
        }
        if !(self.intensity_std >= 0.0) || !(self.outlier_magnitude > 0.0) || !(self.outlier_alpha > 0.0) {
            return bad("intensity_std, outlier_magnitude and outlier_alpha must be positive".into());
        }
        Ok(())
    }
}

/// `cfg.size` scenes; scene `i` depends only on `(cfg, seed, i)`.
pub fn generate_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Vec<Scene>> {
    cfg.validate()?;
    Ok((0..cfg.size).map(|i| generate_scene(cfg, seed, i)).collect())
}

pub fn generate_scene(cfg: &DatasetConfig, seed: u64, index: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let noise = Normal::new(0.0f32, cfg.intensity_std).expect("validated std");
    let mut points = Vec::new();
    let mut boxes: Vec<GtBox> = Vec::new();
    let target = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut attempts = 0;
    while boxes.len() < target && attempts < 64 * (target + 1) {
        attempts += 1;
        let class = rng.random_range(0..NUM_CLASSES);
        let e = cfg.class_extent[class];
        let short = rng.random_range(e[0]..=e[1]);
        let long = rng.random_range(e[2]..=e[3]);
        let (w, h) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
        let cx = rng.random_range(w / 2.0..cfg.field - w / 2.0);
        let cy = rng.random_range(h / 2.0..cfg.field - h / 2.0);
        let cell = |v: f32| (v / cfg.target_cell).floor() as i64;
        let clash = boxes.iter().any(|b| {
            let gap = 0.25;
            let overlap = (cx - b.cx).abs() < (w + b.w) / 2.0 + gap && (cy - b.cy).abs() < (h + b.h) / 2.0 + gap;
            overlap || (cell(cx) == cell(b.cx) && cell(cy) == cell(b.cy))
        });
        if clash {
            continue;
        }
        let visibility = rng.random_range(cfg.min_visibility..=1.0);
        let n = (cfg.point_density * w * h * visibility).round() as usize;
        for _ in 0..n {
            let x = cx + rng.random_range(-0.5..0.5) * w;
            let y = cy + rng.random_range(-0.5..0.5) * h;
            let intensity = (cfg.class_intensity[class] + noise.sample(&mut rng)).clamp(0.0, 1.0);
            points.push([x, y, intensity]);
        }
        boxes.push(GtBox {
            cx,
            cy,
            w,
            h,
            class,
            difficulty: cfg.difficulty.classify(w * h, n),
            points: n,
        });
    }
    for _ in 0..cfg.clutter_points {
        points.push([
            rng.random_range(0.0..cfg.field),
            rng.random_range(0.0..cfg.field),
            rng.random_range(0.0..=cfg.clutter_max_intensity),
        ]);
    }
    if rng.random_bool(cfg.outlier_rate) {
        let u: f32 = rng.random_range(f32::EPSILON..1.0);
        points.push([
            rng.random_range(0.0..cfg.field),
            rng.random_range(0.0..cfg.field),
            cfg.outlier_magnitude * u.powf(-1.0 / cfg.outlier_alpha),
        ]);
    }
    Scene { points, boxes }
}

/// Largest point intensity in `scenes` (0 for no points).
pub fn max_intensity<'a>(scenes: impl IntoIterator<Item = &'a Scene>) -> f32 {
    scenes
        .into_iter()
        .flat_map(|s| s.points.iter().map(|p| p[2]))
        .fold(0.0, f32::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{select_calib_set, Sampling};

    #[test]
    fn same_seed_same_dataset() {
        let cfg = DatasetConfig {
            size: 20,
            ..DatasetConfig::default()
        };
        assert_eq!(generate_dataset(&cfg, 3).unwrap(), generate_dataset(&cfg, 3).unwrap());
        assert_ne!(generate_dataset(&cfg, 3).unwrap(), generate_dataset(&cfg, 4).unwrap());
        // a scene does not depend on the dataset size
        let bigger = generate_dataset(&DatasetConfig { size: 30, ..cfg.clone() }, 3).unwrap();
        assert_eq!(bigger[..20], generate_dataset(&cfg, 3).unwrap()[..]);
    }

    #[test]
    fn no_outliers_means_bounded_intensity() {
        let cfg = DatasetConfig {
            size: 300,
            outlier_rate: 0.0,
            ..DatasetConfig::default()
        };
        let scenes = generate_dataset(&cfg, 1).unwrap();
        assert!(max_intensity(&scenes) <= 1.0);
    }

    #[test]
    fn invalid_rate_is_rejected() {
        let cfg = DatasetConfig {
            outlier_rate: 1.5,
            ..DatasetConfig::default()
        };
        assert!(generate_dataset(&cfg, 0).is_err());
    }

    #[test]
    fn scene_invariants() {
        let cfg = DatasetConfig {
            size: 200,
            ..DatasetConfig::default()
        };
        let mut seen = [false; 3];
        for s in generate_dataset(&cfg, 7).unwrap() {
            assert!(s.boxes.len() <= cfg.max_objects);
            for p in &s.points {
                assert!(p[0] >= 0.0 && p[0] < cfg.field && p[1] >= 0.0 && p[1] < cfg.field);
            }
            for (i, b) in s.boxes.iter().enumerate() {
                assert!(b.w > 0.0 && b.h > 0.0);
                assert_eq!(b.difficulty, cfg.difficulty.classify(b.area(), b.points));
                seen[b.difficulty as usize] = true;
                for o in &s.boxes[i + 1..] {
                    let same_cell = (b.cx / 2.0).floor() == (o.cx / 2.0).floor() && (b.cy / 2.0).floor() == (o.cy / 2.0).floor();
                    assert!(!same_cell);
                }
            }
        }
        assert_eq!(seen, [true; 3], "every difficulty occurs");
    }

    #[test]
    fn difficulty_rule() {
        let r = DifficultyRule::default();
        assert_eq!(r.classify(9.0, 40), Difficulty::Easy);
        assert_eq!(r.classify(9.0, 20), Difficulty::Moderate);
        assert_eq!(r.classify(5.0, 40), Difficulty::Moderate);
        assert_eq!(r.classify(3.9, 40), Difficulty::Hard);
        assert_eq!(r.classify(9.0, 11), Difficulty::Hard);
    }

    #[test]
    fn larger_samples_see_larger_maxima() {
        // direct simulation: mean over seeds of the max intensity in a sample
        let cfg = DatasetConfig {
            size: 4096,
            ..DatasetConfig::default()
        };
        let pool = generate_dataset(&cfg, 11).unwrap();
        let mean_max = |n: usize| {
            (0..8u64)
                .map(|seed| {
                    let set = select_calib_set(pool.len(), n, seed, Sampling::Independent).unwrap();
                    max_intensity(set.resolve(&pool)) as f64
                })
                .sum::<f64>()
                / 8.0
        };
        let (small, large) = (mean_max(4), mean_max(4096));
        assert!(large > small, "{large} vs {small}");
        assert!(large >= cfg.outlier_magnitude as f64);
    }
}
