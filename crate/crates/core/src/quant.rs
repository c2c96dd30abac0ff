//! Symmetric INT8 quantization (zero point fixed at 0, grid [-128, 127]),
//! FP16 simulation and min/max observers.

use std::fmt;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const Q_MIN: i32 = -128;
pub const Q_MAX: i32 = 127;

/// Largest finite binary16 value.
pub const FP16_MAX: f32 = 65504.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtypeTag {
    Fp32,
    Fp16,
    Int8,
}

impl DtypeTag {
    pub const ALL: [DtypeTag; 3] = [DtypeTag::Fp32, DtypeTag::Fp16, DtypeTag::Int8];
}

impl fmt::Display for DtypeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DtypeTag::Fp32 => "FP32",
            DtypeTag::Fp16 => "FP16",
            DtypeTag::Int8 => "INT8",
        })
    }
}

impl std::str::FromStr for DtypeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" => Ok(DtypeTag::Fp32),
            "fp16" => Ok(DtypeTag::Fp16),
            "int8" => Ok(DtypeTag::Int8),
            other => Err(Error::invalid(format!("unknown dtype `{other}` (expected fp32, fp16 or int8)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    scale: f32,
}

impl QuantParams {
    pub fn new(scale: f32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::invalid(format!("quantization scale must be positive and finite, got {scale}")));
        }
        Ok(Self { scale })
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn zero_point(&self) -> i32 {
        0
    }

    /// Real interval that maps onto the integer grid without saturating.
    pub fn clip_range(&self) -> (f32, f32) {
        (Q_MIN as f32 * self.scale, Q_MAX as f32 * self.scale)
    }
}

/// Min-max scale: `max(|x_min|, |x_max|) / 127`, falling back to 1.0 for an
/// all-zero range.
pub fn compute_scale(x_min: f32, x_max: f32) -> Result<QuantParams> {
    if !x_min.is_finite() || !x_max.is_finite() {
        return Err(Error::NonFinite(format!("calibration range ({x_min}, {x_max})")));
    }
    if x_min > x_max {
        return Err(Error::invalid(format!("calibration range has min {x_min} > max {x_max}")));
    }
    let max_abs = x_min.abs().max(x_max.abs());
    if max_abs == 0.0 {
        return QuantParams::new(1.0);
    }
    // Subnormal ranges can underflow to zero after the division.
    QuantParams::new((max_abs / Q_MAX as f32).max(f32::MIN_POSITIVE))
}

pub fn quantize(x: f32, qp: QuantParams) -> i32 {
    let q = (x / qp.scale).round_ties_even();
    q.clamp(Q_MIN as f32, Q_MAX as f32) as i32
}

pub fn dequantize(x_q: i32, qp: QuantParams) -> f32 {
    x_q as f32 * qp.scale
}

pub fn fake_quant_value(x: f32, qp: QuantParams) -> f32 {
    dequantize(quantize(x, qp), qp)
}

pub fn fake_quant(t: &Tensor, qp: QuantParams) -> Tensor {
    t.map(|x| fake_quant_value(x, qp))
}

/// Round-trips every element through binary16 (round to nearest even),
/// saturating at ±65504 instead of overflowing to infinity.
pub fn fp16_roundtrip(t: &Tensor) -> Tensor {
    t.map(fp16_value)
}

pub fn fp16_value(x: f32) -> f32 {
    f16::from_f32(x.clamp(-FP16_MAX, FP16_MAX)).to_f32()
}

/// Weight quantization granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerTensor,
    /// One scale per slice along axis 0 (output channel).
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightQuant {
    PerTensor(QuantParams),
    PerChannel(Vec<QuantParams>),
}

impl WeightQuant {
    /// One-shot observation of a weight tensor.
    pub fn from_weights(weight: &Tensor, granularity: Granularity) -> Result<Self> {
        match granularity {
            Granularity::PerTensor => {
                let mut obs = MinMaxObserver::new();
                obs.observe(weight)?;
                Ok(WeightQuant::PerTensor(obs.quant_params()?))
            }
            Granularity::PerChannel => {
                let channels = weight.shape().first().copied().unwrap_or(0);
                let per = if channels == 0 { 0 } else { weight.len() / channels };
                weight
                    .data()
                    .chunks(per.max(1))
                    .take(channels)
                    .map(|slice| {
                        let mut obs = MinMaxObserver::new();
                        obs.observe_slice(slice)?;
                        obs.quant_params()
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(WeightQuant::PerChannel)
            }
        }
    }

    pub fn params_for_channel(&self, channel: usize) -> QuantParams {
        match self {
            WeightQuant::PerTensor(qp) => *qp,
            WeightQuant::PerChannel(v) => v[channel],
        }
    }

    pub fn fake_quant(&self, weight: &Tensor) -> Tensor {
        match self {
            WeightQuant::PerTensor(qp) => fake_quant(weight, *qp),
            WeightQuant::PerChannel(params) => {
                let per = weight.len() / params.len().max(1);
                let mut out = weight.clone();
                for (slice, qp) in out.data_mut().chunks_mut(per.max(1)).zip(params) {
                    for v in slice {
                        *v = fake_quant_value(*v, *qp);
                    }
                }
                out
            }
        }
    }

    /// Mask of weight elements inside their channel's clip range (STE pass-through).
    pub fn in_range_mask(&self, weight: &Tensor) -> Vec<bool> {
        let channels = match self {
            WeightQuant::PerTensor(_) => 1,
            WeightQuant::PerChannel(v) => v.len().max(1),
        };
        let per = (weight.len() / channels).max(1);
        weight
            .data()
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let (lo, hi) = self.params_for_channel(if channels == 1 { 0 } else { i / per }).clip_range();
                w >= lo && w <= hi
            })
            .collect()
    }
}

/// Running min/max over everything observed so far.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MinMaxObserver {
    range: Option<(f32, f32)>,
    count: u64,
}

impl MinMaxObserver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds an observer from a stored `(range, count)` pair.
    pub fn from_parts(range: Option<(f32, f32)>, count: u64) -> Result<Self> {
        if let Some((lo, hi)) = range {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::invalid(format!("observer range ({lo}, {hi}) is not a finite interval")));
            }
            if count == 0 {
                return Err(Error::invalid("observer with a range must have a positive count"));
            }
        }
        Ok(Self { range, count })
    }

    pub fn range(&self) -> Option<(f32, f32)> {
        self.range
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn observe(&mut self, t: &Tensor) -> Result<()> {
        self.observe_slice(t.data())
    }

    pub fn observe_slice(&mut self, values: &[f32]) -> Result<()> {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in values {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("observed tensor element {v}")));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !values.is_empty() {
            self.range = Some(match self.range {
                Some((a, b)) => (a.min(lo), b.max(hi)),
                None => (lo, hi),
            });
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(&self, other: &MinMaxObserver) -> MinMaxObserver {
        let range = match (self.range, other.range) {
            (Some((a, b)), Some((c, d))) => Some((a.min(c), b.max(d))),
            (r, None) | (None, r) => r,
        };
        MinMaxObserver {
            range,
            count: self.count + other.count,
        }
    }

    /// Min-max scale for the observed range; an empty observer takes the
    /// degenerate fallback.
    pub fn quant_params(&self) -> Result<QuantParams> {
        let (lo, hi) = self.range.unwrap_or((0.0, 0.0));
        compute_scale(lo, hi)
    }

    /// Largest magnitude seen, 0 when empty.
    pub fn max_abs(&self) -> f32 {
        self.range.map_or(0.0, |(lo, hi)| lo.abs().max(hi.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qp(s: f32) -> QuantParams {
        QuantParams::new(s).unwrap()
    }

    #[test]
    fn scale_examples() {
        assert_eq!(compute_scale(-1.0, 2.0).unwrap().scale(), 2.0 / 127.0);
        assert!((compute_scale(-1.0, 2.0).unwrap().scale() - 0.015748).abs() < 1e-6);
        assert_eq!(compute_scale(-127.0, 127.0).unwrap().scale(), 1.0);
        assert_eq!(compute_scale(0.0, 0.0).unwrap().scale(), 1.0);
        assert_eq!(compute_scale(0.0, 0.0).unwrap().zero_point(), 0);
        assert!(compute_scale(f32::NAN, 1.0).is_err());
        assert!(compute_scale(0.0, f32::INFINITY).is_err());
        assert!(compute_scale(1.0, -1.0).is_err());
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.0, qp(0.37)), 0);
        assert_eq!(quantize(2.5, qp(1.0)), 2);
        assert_eq!(quantize(3.5, qp(1.0)), 4);
        assert_eq!(quantize(-2.5, qp(1.0)), -2);
        assert_eq!(quantize(1000.0, qp(1.0)), 127);
        assert_eq!(quantize(-1000.0, qp(1.0)), -128);
    }

    #[test]
    fn dequantize_examples() {
        assert_eq!(dequantize(0, qp(0.3)), 0.0);
        assert_eq!(dequantize(127, qp(1.0)), 127.0);
    }

    #[test]
    fn fake_quant_fixed_points() {
        let s = 0.05f32;
        let grid = Tensor::from_fn(&[255], |i| (i as i32 - 127) as f32 * s);
        assert_eq!(fake_quant(&grid, qp(s)), grid);
        assert!(fake_quant(&Tensor::zeros(&[4]), qp(s)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fp16_examples() {
        let t = Tensor::new(vec![4], vec![1.0, 2049.0, 1e6, -1e6]).unwrap();
        assert_eq!(fp16_roundtrip(&t).data(), &[1.0, 2048.0, 65504.0, -65504.0]);
    }

    #[test]
    fn fp16_exact_on_small_integers() {
        let t = Tensor::from_fn(&[4097], |i| i as f32 - 2048.0);
        assert_eq!(fp16_roundtrip(&t), t);
    }

    #[test]
    fn observer_examples() {
        let mut obs = MinMaxObserver::new();
        assert_eq!(obs.range(), None);
        obs.observe(&Tensor::new(vec![2], vec![-1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(obs.range(), Some((-1.0, 3.0)));
        obs.observe(&Tensor::zeros(&[2])).unwrap();
        assert_eq!(obs.range(), Some((-1.0, 3.0)));
        assert_eq!(obs.count(), 2);
        assert!(obs.observe(&Tensor::new(vec![1], vec![f32::NAN]).unwrap()).is_err());
    }

    #[test]
    fn per_channel_scales_follow_each_row() {
        let w = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 0.25]).unwrap();
        let wq = WeightQuant::from_weights(&w, Granularity::PerChannel).unwrap();
        assert_eq!(wq.params_for_channel(0).scale(), 2.0 / 127.0);
        assert_eq!(wq.params_for_channel(1).scale(), 0.5 / 127.0);
        let fq = wq.fake_quant(&w);
        assert_eq!(fq.data()[1], -2.0);
        assert_eq!(fq.data()[2], 0.5);
    }

    proptest! {
        #[test]
        fn quantize_monotone(a in -500.0f32..500.0, b in -500.0f32..500.0, s in 0.01f32..5.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantize(lo, qp(s)) <= quantize(hi, qp(s)));
        }

        #[test]
        fn fake_quant_idempotent(v in proptest::collection::vec(-100.0f32..100.0, 1..32), s in 0.01f32..2.0) {
            let t = Tensor::new(vec![v.len()], v).unwrap();
            let once = fake_quant(&t, qp(s));
            prop_assert_eq!(fake_quant(&once, qp(s)), once);
        }

        #[test]
        fn error_splits_into_rounding_and_clipping(x in -400.0f32..400.0, s in 0.05f32..2.0) {
            let q = qp(s);
            let (lo, hi) = q.clip_range();
            let err = (x - fake_quant_value(x, q)).abs();
            if x >= lo && x <= hi {
                prop_assert!(err <= s / 2.0 * (1.0 + 1e-5));
            } else {
                let clip = if x > hi { x - hi } else { lo - x };
                prop_assert!((err - clip).abs() <= 1e-3 * (1.0 + clip));
            }
        }

        #[test]
        fn scale_equivariant(lo in -100.0f32..0.0, hi in 0.0f32..100.0, c in 0.1f32..10.0) {
            prop_assume!(lo.abs().max(hi) > 1e-3);
            let base = compute_scale(lo, hi).unwrap().scale();
            let scaled = compute_scale(c * lo, c * hi).unwrap().scale();
            prop_assert!((scaled - c * base).abs() <= 1e-5 * scaled);
        }

        #[test]
        fn fp16_idempotent(v in proptest::collection::vec(-1e5f32..1e5, 1..32)) {
            let t = Tensor::new(vec![v.len()], v).unwrap();
            let once = fp16_roundtrip(&t);
            prop_assert_eq!(fp16_roundtrip(&once), once);
        }

        #[test]
        fn observer_order_independent(a in proptest::collection::vec(-50.0f32..50.0, 1..16),
                                      b in proptest::collection::vec(-50.0f32..50.0, 1..16)) {
            let ta = Tensor::new(vec![a.len()], a).unwrap();
            let tb = Tensor::new(vec![b.len()], b).unwrap();
            let mut ab = MinMaxObserver::new();
            ab.observe(&ta).unwrap();
            ab.observe(&tb).unwrap();
            let mut ba = MinMaxObserver::new();
            ba.observe(&tb).unwrap();
            ba.observe(&ta).unwrap();
            prop_assert_eq!(ab.range(), ba.range());
            let mut oa = MinMaxObserver::new();
            oa.observe(&ta).unwrap();
            let mut ob = MinMaxObserver::new();
            ob.observe(&tb).unwrap();
            prop_assert_eq!(oa.merge(&ob), ab);
        }
    }
}
