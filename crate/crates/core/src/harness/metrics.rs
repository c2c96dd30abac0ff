//! AP40 with difficulty stratification, the evaluation table and Pearson
//! correlation.
//!
//! Matching is greedy per scene by descending score. A detection that
//! matches a same-class ground truth of another difficulty is ignored
//! rather than counted as a false positive.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::decode::{iou, Detection};
use crate::harness::scene::{Difficulty, GtBox, CLASS_NAMES, NUM_CLASSES};

pub const RECALL_POSITIONS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

/// Per-detection outcomes for one scene, detections visited by descending
/// score (stable).
fn match_scene(dets: &[&Detection], gts: &[GtBox], class: usize, difficulty: Difficulty, iou_match: f32) -> Vec<(f32, Outcome)> {
    let gts: Vec<&GtBox> = gts.iter().filter(|g| g.class == class).collect();
    let mut taken = vec![false; gts.len()];
    let mut order: Vec<&&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    order
        .into_iter()
        .map(|d| {
            let mut best: Option<(usize, f32)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = iou(d.bbox(), [g.cx, g.cy, g.w, g.h]);
                if o >= iou_match && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            let outcome = match best {
                Some((j, _)) => {
                    taken[j] = true;
                    if gts[j].difficulty == difficulty {
                        Outcome::Tp
                    } else {
                        Outcome::Ignored
                    }
                }
                None => Outcome::Fp,
            };
            (d.score, outcome)
        })
        .collect()
}

/// Mean over recall positions `1/40 … 1` of the interpolated precision
/// (best precision at any operating point with recall ≥ r). Operating
/// points are score thresholds, so tied scores enter together.
/// `None` when no ground truth of this class and difficulty exists.
pub fn ap40(
    detections: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    class: usize,
    difficulty: Difficulty,
    iou_match: f32,
) -> Result<Option<f64>> {
    if !(iou_match > 0.0 && iou_match < 1.0) {
        return Err(Error::invalid(format!("iou_match {iou_match} must lie in (0, 1)")));
    }
    if detections.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} detection lists for {} scenes",
            detections.len(),
            gts.len()
        )));
    }
    let npos = gts
        .iter()
        .flatten()
        .filter(|g| g.class == class && g.difficulty == difficulty)
        .count();
    if npos == 0 {
        return Ok(None);
    }
    let mut all: Vec<(f32, Outcome)> = Vec::new();
    for (dets, g) in detections.iter().zip(gts) {
        let mine: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
        all.extend(match_scene(&mine, g, class, difficulty, iou_match));
    }
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, outcome)) in all.iter().enumerate() {
        match outcome {
            Outcome::Tp => tp += 1,
            Outcome::Fp => fp += 1,
            Outcome::Ignored => {}
        }
        let group_end = all.get(i + 1).is_none_or(|next| next.0 != score);
        if group_end && tp + fp > 0 {
            curve.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
        }
    }
    Ok(Some(interpolated_mean(&curve)))
}

/// Mean interpolated precision at the 40 recall positions of `(recall,
/// precision)` operating points.
pub(crate) fn interpolated_mean(curve: &[(f64, f64)]) -> f64 {
    (1..=RECALL_POSITIONS)
        .map(|k| {
            let r = k as f64 / RECALL_POSITIONS as f64;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / RECALL_POSITIONS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub class: String,
    pub difficulty: Difficulty,
    /// Percent; `None` when the stratum has no ground truth.
    pub ap40: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub entries: Vec<ApEntry>,
    /// Mean over classes of moderate AP40, percent.
    pub map: f64,
}

impl EvalResult {
    /// Mean AP40 over classes at `difficulty` (absent strata excluded).
    pub fn map_at(&self, difficulty: Difficulty) -> Option<f64> {
        let v: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.difficulty == difficulty)
            .filter_map(|e| e.ap40)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `{"<class>.<difficulty>.ap40": value, …, "map": value}`.
    pub fn keyed(&self) -> BTreeMap<String, Option<f64>> {
        let mut out: BTreeMap<String, Option<f64>> = self
            .entries
            .iter()
            .map(|e| (format!("{}.{}.ap40", e.class, e.difficulty), e.ap40))
            .collect();
        out.insert("map".into(), Some(self.map));
        out
    }
}

/// Full class × difficulty table. `iou_match` is per class.
pub fn evaluate_detections(
    detections: &[Vec<Detection>],
    gts: &[Vec<GtBox>],
    iou_match: [f32; NUM_CLASSES],
) -> Result<EvalResult> {
    let mut entries = Vec::with_capacity(NUM_CLASSES * 3);
    for (class, name) in CLASS_NAMES.iter().enumerate() {
        for d in Difficulty::ALL {
            entries.push(ApEntry {
                class: name.to_string(),
                difficulty: d,
                ap40: ap40(detections, gts, class, d, iou_match[class])?.map(|v| v * 100.0),
            });
        }
    }
    let mut result = EvalResult { entries, map: 0.0 };
    result.map = result
        .map_at(Difficulty::Moderate)
        .ok_or_else(|| Error::invalid("no moderate ground truth in the evaluation set"))?;
    Ok(result)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Undefined(format!(
            "needs two equal-length series of at least 2 values, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("a series is constant".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn gt(cx: f32, cy: f32, class: usize, difficulty: Difficulty) -> GtBox {
        GtBox {
            cx,
            cy,
            w: 2.0,
            h: 2.0,
            class,
            difficulty,
            points: 20,
        }
    }

    pub(crate) fn det(cx: f32, cy: f32, class: usize, score: f32) -> Detection {
        Detection {
            cx,
            cy,
            w: 2.0,
            h: 2.0,
            class,
            score,
        }
    }

    /// Enumerates every score threshold, re-runs matching on the surviving
    /// detections and interpolates the resulting precision-recall points.
    pub(crate) fn brute_force_ap40(dets: &[Vec<Detection>], gts: &[Vec<GtBox>], class: usize, d: Difficulty, thr: f32) -> Option<f64> {
        let npos = gts.iter().flatten().filter(|g| g.class == class && g.difficulty == d).count();
        if npos == 0 {
            return None;
        }
        let mut thresholds: Vec<f32> = dets.iter().flatten().filter(|x| x.class == class).map(|x| x.score).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let mut points = Vec::new();
        for t in thresholds {
            let (mut tp, mut fp) = (0, 0);
            for (sd, sg) in dets.iter().zip(gts) {
                let kept: Vec<&Detection> = sd.iter().filter(|x| x.class == class && x.score >= t).collect();
                // naive matching: repeatedly take the highest-scoring
                // unvisited detection
                let mut visited = vec![false; kept.len()];
                let cands: Vec<&GtBox> = sg.iter().filter(|g| g.class == class).collect();
                let mut used = vec![false; cands.len()];
                for _ in 0..kept.len() {
                    let mut pick = None;
                    for (i, k) in kept.iter().enumerate() {
                        if !visited[i] && pick.is_none_or(|p: usize| k.score > kept[p].score) {
                            pick = Some(i);
                        }
                    }
                    let i = pick.unwrap();
                    visited[i] = true;
                    let mut best: Option<(usize, f32)> = None;
                    for (j, g) in cands.iter().enumerate() {
                        let o = iou(kept[i].bbox(), [g.cx, g.cy, g.w, g.h]);
                        if !used[j] && o >= thr && best.is_none_or(|(_, b)| o > b) {
                            best = Some((j, o));
                        }
                    }
                    match best {
                        Some((j, _)) => {
                            used[j] = true;
                            if cands[j].difficulty == d {
                                tp += 1;
                            }
                        }
                        None => fp += 1,
                    }
                }
            }
            if tp + fp > 0 {
                points.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
            }
        }
        let mut sum = 0.0;
        for k in 1..=40 {
            let r = k as f64 / 40.0;
            sum += points.iter().filter(|p| p.0 >= r - 1e-12).map(|p| p.1).fold(0.0, f64::max);
        }
        Some(sum / 40.0)
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![vec![gt(2.0, 2.0, 0, Difficulty::Moderate), gt(8.0, 8.0, 0, Difficulty::Moderate)]];
        let perfect = vec![vec![det(2.0, 2.0, 0, 1.0), det(8.0, 8.0, 0, 1.0)]];
        assert_eq!(ap40(&perfect, &gts, 0, Difficulty::Moderate, 0.5).unwrap(), Some(1.0));
        assert_eq!(ap40(&[vec![]], &gts, 0, Difficulty::Moderate, 0.5).unwrap(), Some(0.0));
        assert_eq!(ap40(&perfect, &gts, 1, Difficulty::Moderate, 0.5).unwrap(), None);
        assert!(ap40(&perfect, &gts, 0, Difficulty::Moderate, 1.0).is_err());
    }

    #[test]
    fn worked_example_is_one_half() {
        let gts = vec![vec![gt(2.0, 2.0, 0, Difficulty::Moderate)]];
        let dets = vec![vec![det(2.0, 2.0, 0, 0.9), det(9.0, 9.0, 0, 0.95)]];
        assert_eq!(ap40(&dets, &gts, 0, Difficulty::Moderate, 0.5).unwrap(), Some(0.5));
        assert_eq!(brute_force_ap40(&dets, &gts, 0, Difficulty::Moderate, 0.5), Some(0.5));
    }

    #[test]
    fn other_difficulty_matches_are_ignored() {
        let gts = vec![vec![gt(2.0, 2.0, 0, Difficulty::Moderate), gt(8.0, 8.0, 0, Difficulty::Easy)]];
        let dets = vec![vec![det(8.0, 8.0, 0, 0.99), det(2.0, 2.0, 0, 0.5)]];
        assert_eq!(ap40(&dets, &gts, 0, Difficulty::Moderate, 0.5).unwrap(), Some(1.0));
    }

    #[test]
    fn table_and_keys() {
        let gts = vec![vec![gt(2.0, 2.0, 0, Difficulty::Moderate), gt(8.0, 8.0, 2, Difficulty::Moderate)]];
        let dets = vec![vec![det(2.0, 2.0, 0, 0.8)]];
        let r = evaluate_detections(&dets, &gts, [0.5; 3]).unwrap();
        assert_eq!(r.map, 50.0);
        let keys = r.keyed();
        assert_eq!(keys["large.moderate.ap40"], Some(100.0));
        assert_eq!(keys["small.moderate.ap40"], Some(0.0));
        assert_eq!(keys["long.moderate.ap40"], None);
        assert_eq!(keys["map"], Some(50.0));
        assert_eq!(r.map_at(Difficulty::Easy), None);
    }

    #[test]
    fn pearson_cases() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let up: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let down: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&xs, &down).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0]).unwrap() - 0.866).abs() < 1e-3);
        assert!(matches!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Undefined(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    pub(crate) fn random_instance() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<Vec<GtBox>>)> {
        let scene = (
            prop::collection::vec((0u8..6, 0u8..6, 0usize..2, 0usize..3), 0..5),
            prop::collection::vec((0u8..6, 0u8..6, 0usize..2, 0u8..12), 0..6),
        );
        prop::collection::vec(scene, 1..4).prop_map(|scenes| {
            let mut dets = Vec::new();
            let mut gts = Vec::new();
            for (g, d) in scenes {
                gts.push(
                    g.into_iter()
                        .map(|(x, y, c, k)| gt(x as f32 * 1.5, y as f32 * 1.5, c, Difficulty::ALL[k]))
                        .collect(),
                );
                dets.push(
                    d.into_iter()
                        .map(|(x, y, c, s)| det(x as f32 * 1.5 + 0.3, y as f32 * 1.5, c, s as f32 / 12.0))
                        .collect(),
                );
            }
            (dets, gts)
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((dets, gts) in random_instance(), class in 0usize..2, k in 0usize..3) {
            let d = Difficulty::ALL[k];
            let fast = ap40(&dets, &gts, class, d, 0.5).unwrap();
            let slow = brute_force_ap40(&dets, &gts, class, d, 0.5);
            match (fast, slow) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}"),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn invariant_under_monotone_rescoring((dets, gts) in random_instance()) {
            let squashed: Vec<Vec<Detection>> = dets
                .iter()
                .map(|s| s.iter().map(|d| Detection { score: d.score * d.score * 0.5 + 0.1, ..*d }).collect())
                .collect();
            for d in Difficulty::ALL {
                prop_assert_eq!(ap40(&dets, &gts, 0, d, 0.5).unwrap(), ap40(&squashed, &gts, 0, d, 0.5).unwrap());
            }
        }

        #[test]
        fn top_false_positive_never_helps((dets, gts) in random_instance()) {
            let mut worse = dets.clone();
            worse[0].push(det(40.0, 40.0, 0, 2.0));
            for d in Difficulty::ALL {
                if let (Some(a), Some(b)) = (ap40(&dets, &gts, 0, d, 0.5).unwrap(), ap40(&worse, &gts, 0, d, 0.5).unwrap()) {
                    prop_assert!(b <= a + 1e-12);
                }
            }
        }
    }
}
