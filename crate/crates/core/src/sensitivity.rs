//! One-layer-at-a-time sensitivity sweep, top-k selection, greedy prefix
//! candidates, an exhaustive subset oracle and final PTQ of a plan.
//!
//! Calibration observes every layer in FP32, so one stats object per
//! calibration set serves every plan built from the same graph.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_on, mean_std, CalibSet, CalibrationStats};
use crate::error::{Error, Result};
use crate::evaluator::Evaluator;
use crate::graph::{apply_plan, ModelGraph, ModelInput, PrecisionPlan};
use crate::quant::{DtypeTag, Granularity};

/// Largest number of subsets [`exhaustive_search`] will enumerate.
pub const EXHAUSTIVE_LIMIT: u128 = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub layer: usize,
    pub name: String,
    pub seed: u64,
    /// `None` when the evaluation failed.
    pub score: Option<f64>,
    /// 1 = lowest score within this seed; `None` for failed records.
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub seed: u64,
    pub baseline_score: f64,
    pub records: Vec<SensitivityRecord>,
}

impl SweepReport {
    pub fn failures(&self) -> Vec<(usize, String)> {
        self.records
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| (r.layer, e.clone())))
            .collect()
    }

    /// Records when every evaluation succeeded, otherwise the summary error.
    pub fn into_result(self) -> Result<Vec<SensitivityRecord>> {
        let failures = self.failures();
        if failures.is_empty() {
            Ok(self.records)
        } else {
            Err(Error::SweepFailed {
                total: self.records.len(),
                failures,
            })
        }
    }
}

/// Plan with only `layer` in INT8 and every other layer in FP32.
pub fn single_int8_plan(layer: usize) -> PrecisionPlan {
    PrecisionPlan::uniform(DtypeTag::Fp32).with(layer, DtypeTag::Int8)
}

/// Quantizes each layer alone to INT8 (others FP32), calibrated on `calib`,
/// and scores it. Evaluation failures are recorded and the sweep goes on.
pub fn sweep(
    graph: &ModelGraph,
    dataset: &[ModelInput],
    calib: &CalibSet,
    granularity: Granularity,
    evaluator: &dyn Evaluator,
) -> Result<SweepReport> {
    let order: Vec<usize> = graph.layers().map(|l| l.index).collect();
    sweep_in_order(graph, dataset, calib, granularity, evaluator, &order)
}

/// [`sweep`] visiting layers in `order`; records come back in index order.
pub fn sweep_in_order(
    graph: &ModelGraph,
    dataset: &[ModelInput],
    calib: &CalibSet,
    granularity: Granularity,
    evaluator: &dyn Evaluator,
    order: &[usize],
) -> Result<SweepReport> {
    let baseline = apply_plan(graph, &PrecisionPlan::uniform(DtypeTag::Fp32))?;
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != baseline.layers().map(|l| l.index).collect::<Vec<_>>() {
        return Err(Error::invalid(format!(
            "sweep order {order:?} is not a permutation of the layer indices"
        )));
    }
    let stats = calibrate_on(&baseline, dataset, calib, granularity)?;
    let baseline_score = evaluator.evaluate(&baseline, Some(&stats))?;
    let mut by_layer = BTreeMap::new();
    for &layer in order {
        let outcome = apply_plan(&baseline, &single_int8_plan(layer)).and_then(|g| evaluator.evaluate(&g, Some(&stats)));
        by_layer.insert(layer, outcome);
    }
    let mut records: Vec<SensitivityRecord> = by_layer
        .into_iter()
        .map(|(layer, outcome)| {
            let name = baseline.layer(layer).map(|l| l.name.clone()).unwrap_or_default();
            let (score, error) = match outcome {
                Ok(s) if s.is_finite() => (Some(s), None),
                Ok(s) => (None, Some(format!("non-finite score {s}"))),
                Err(e) => (None, Some(e.to_string())),
            };
            SensitivityRecord {
                layer,
                name,
                seed: calib.seed,
                score,
                rank: None,
                error,
            }
        })
        .collect();
    assign_ranks(&mut records);
    Ok(SweepReport {
        seed: calib.seed,
        baseline_score,
        records,
    })
}

fn assign_ranks(records: &mut [SensitivityRecord]) {
    let mut scored: Vec<(f64, usize, usize)> = records
        .iter()
        .enumerate()
        .filter_map(|(pos, r)| r.score.map(|s| (s, r.layer, pos)))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (rank, (_, _, pos)) in scored.into_iter().enumerate() {
        records[pos].rank = Some(rank + 1);
    }
}

/// Runs [`sweep`] once per seed, drawing a fresh calibration set each time.
pub fn sweep_seeds(
    graph: &ModelGraph,
    dataset: &[ModelInput],
    calib_sets: &[CalibSet],
    granularity: Granularity,
    evaluator: &dyn Evaluator,
) -> Result<Vec<SweepReport>> {
    calib_sets
        .iter()
        .map(|set| sweep(graph, dataset, set, granularity, evaluator))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub layer: usize,
    pub name: String,
    pub mean_score: f64,
    pub std_score: f64,
    pub seeds: usize,
}

/// Per-layer seed-mean scores, most sensitive (lowest) first; ties go to
/// the lower index. Failed records are an error.
pub fn ranking(records: &[SensitivityRecord]) -> Result<Vec<LayerSensitivity>> {
    let mut by_layer: BTreeMap<usize, (String, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let score = r.score.ok_or_else(|| {
            Error::invalid(format!(
                "layer {} (seed {}) has no score: {}",
                r.layer,
                r.seed,
                r.error.as_deref().unwrap_or("failed")
            ))
        })?;
        by_layer.entry(r.layer).or_insert_with(|| (r.name.clone(), Vec::new())).1.push(score);
    }
    let mut out: Vec<LayerSensitivity> = by_layer
        .into_iter()
        .map(|(layer, (name, scores))| {
            let (mean_score, std_score) = mean_std(&scores);
            LayerSensitivity {
                layer,
                name,
                mean_score,
                std_score,
                seeds: scores.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.mean_score.total_cmp(&b.mean_score).then(a.layer.cmp(&b.layer)));
    Ok(out)
}

/// The `k` most sensitive layer indices, most sensitive first.
pub fn select_topk(records: &[SensitivityRecord], k: usize) -> Result<Vec<usize>> {
    let ranked = ranking(records)?;
    if k == 0 || k > ranked.len() {
        return Err(Error::invalid(format!("k = {k} must be within 1..={}", ranked.len())));
    }
    Ok(ranked.into_iter().take(k).map(|r| r.layer).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePlan {
    /// FP16 layers in the order they were added.
    pub fp16_set: Vec<usize>,
    pub plan: PrecisionPlan,
}

impl CandidatePlan {
    pub fn new(fp16_set: Vec<usize>) -> Self {
        let plan = PrecisionPlan::int8_with_fp16(&fp16_set);
        Self { fp16_set, plan }
    }

    /// `FP16: 1,22,3` in insertion order; `INT8` for the empty set.
    pub fn label(&self) -> String {
        if self.fp16_set.is_empty() {
            return DtypeTag::Int8.to_string();
        }
        let ids: Vec<String> = self.fp16_set.iter().map(usize::to_string).collect();
        format!("{}: {}", DtypeTag::Fp16, ids.join(","))
    }
}

/// Candidate `i` keeps the first `i` ranked layers in FP16.
pub fn greedy_candidates(ranking: &[usize], k: usize) -> Result<Vec<CandidatePlan>> {
    if k > ranking.len() {
        return Err(Error::invalid(format!("k = {k} exceeds the ranking length {}", ranking.len())));
    }
    Ok((1..=k).map(|i| CandidatePlan::new(ranking[..i].to_vec())).collect())
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

#[derive(Debug, Clone)]
pub struct Finalized {
    pub graph: ModelGraph,
    pub stats: CalibrationStats,
    pub score: f64,
}

/// Applies `plan`, calibrates it from scratch on `calib` and scores it.
pub fn finalize_ptq(
    graph: &ModelGraph,
    plan: &PrecisionPlan,
    dataset: &[ModelInput],
    calib: &CalibSet,
    granularity: Granularity,
    evaluator: &dyn Evaluator,
) -> Result<Finalized> {
    let g = apply_plan(graph, plan)?;
    let stats = calibrate_on(&g, dataset, calib, granularity)?;
    let score = evaluator.evaluate(&g, Some(&stats))?;
    Ok(Finalized { graph: g, stats, score })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustiveResult {
    pub best: CandidatePlan,
    pub best_score: f64,
    /// Every subset in lexicographic order with its score.
    pub scored: Vec<(Vec<usize>, f64)>,
}

/// Scores every `k`-subset of layers in FP16 (rest INT8) and returns the
/// best; ties keep the lexicographically first subset.
pub fn exhaustive_search(
    graph: &ModelGraph,
    dataset: &[ModelInput],
    calib: &CalibSet,
    granularity: Granularity,
    evaluator: &dyn Evaluator,
    k: usize,
) -> Result<ExhaustiveResult> {
    let n = graph.num_layers();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k = {k} must be within 1..={n}")));
    }
    let count = binomial(n, k);
    if count > EXHAUSTIVE_LIMIT {
        return Err(Error::SearchTooLarge {
            count,
            limit: EXHAUSTIVE_LIMIT,
        });
    }
    // calibration is plan-independent, so one pass serves every subset
    let stats = calibrate_on(graph, dataset, calib, granularity)?;
    let mut scored = Vec::with_capacity(count as usize);
    let mut subset: Vec<usize> = (1..=k).collect();
    loop {
        let g = apply_plan(graph, &PrecisionPlan::int8_with_fp16(&subset))?;
        scored.push((subset.clone(), evaluator.evaluate(&g, Some(&stats))?));
        // next combination in lexicographic order
        let Some(pos) = (0..k).rev().find(|&i| subset[i] < n - (k - 1 - i)) else {
            break;
        };
        subset[pos] += 1;
        for i in pos + 1..k {
            subset[i] = subset[i - 1] + 1;
        }
    }
    let (set, best_score) = scored
        .iter()
        .fold(None::<&(Vec<usize>, f64)>, |best, cur| match best {
            Some(b) if b.1 >= cur.1 => Some(b),
            _ => Some(cur),
        })
        .cloned()
        .expect("at least one subset");
    Ok(ExhaustiveResult {
        best: CandidatePlan::new(set),
        best_score,
        scored,
    })
}

/// Sweep CSV with header `layer,name,seed,score`; failed rows have an empty score.
pub fn records_to_csv(records: &[SensitivityRecord]) -> String {
    let mut out = String::from("layer,name,seed,score\n");
    for r in records {
        let score = r.score.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.layer, r.name, r.seed, score);
    }
    out
}
