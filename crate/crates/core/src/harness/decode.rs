//! Head-map decoding and per-class greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::detector::REG_CHANNELS;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
    pub class: usize,
    pub score: f32,
}

/// Intersection over union of two axis-aligned `(cx, cy, w, h)` boxes.
pub fn iou(a: [f32; 4], b: [f32; 4]) -> f32 {
    let ix = ((a[0] + a[2] / 2.0).min(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).max(b[0] - b[2] / 2.0)).max(0.0);
    let iy = ((a[1] + a[3] / 2.0).min(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).max(b[1] - b[3] / 2.0)).max(0.0);
    let inter = ix * iy;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

impl Detection {
    pub fn bbox(&self) -> [f32; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

pub fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Log-size offsets are clamped to this magnitude before `exp`.
const MAX_LOG_SIZE: f32 = 4.0;

/// Decodes every `(cell, class)` whose sigmoid score reaches `score_thresh`,
/// then keeps, per class, boxes in descending score order that overlap no
/// kept box by more than `iou_thresh`. `cell` is `[y, x]` field units per
/// map cell.
pub fn decode_and_nms(
    cls_map: &Tensor,
    reg_map: &Tensor,
    cell: [f32; 2],
    score_thresh: f32,
    iou_thresh: f32,
) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&score_thresh) || !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::invalid(format!(
            "thresholds must lie in [0, 1], got score {score_thresh} and iou {iou_thresh}"
        )));
    }
    let [n, classes, h, w] = cls_map.dims4("decode")?;
    if n != 1 || reg_map.shape() != [1, REG_CHANNELS, h, w] {
        return Err(Error::shape(
            "decode",
            format!("cls {:?} vs reg {:?}", cls_map.shape(), reg_map.shape()),
        ));
    }
    let plane = h * w;
    let reg = reg_map.data();
    let mut out = Vec::new();
    for class in 0..classes {
        let mut cands: Vec<Detection> = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let at = r * w + c;
                let score = sigmoid(cls_map.data()[class * plane + at]);
                if !(score >= score_thresh) {
                    continue;
                }
                let off = |k: usize| reg[k * plane + at];
                cands.push(Detection {
                    cx: (c as f32 + 0.5 + off(0)) * cell[1],
                    cy: (r as f32 + 0.5 + off(1)) * cell[0],
                    w: cell[1] * off(2).clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp(),
                    h: cell[0] * off(3).clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp(),
                    class,
                    score,
                });
            }
        }
        // stable: equal scores keep raster order
        cands.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut kept: Vec<Detection> = Vec::new();
        for d in cands {
            if kept.iter().all(|k| iou(k.bbox(), d.bbox()) <= iou_thresh) {
                kept.push(d);
            }
        }
        out.extend(kept);
    }
    Ok(out)
}
