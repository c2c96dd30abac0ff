//! Experiment drivers on the synthetic task: data preparation, FP32
//! pretraining, detection scoring, calibration-size curves per difficulty
//! and the end-to-end mixed-precision pipeline.

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate_on, mean_std, select_calib_set, CalibrationStats, Sampling};
use crate::error::{Error, Result};
use crate::evaluator::Evaluator;
use crate::graph::{apply_plan, forward, ModelGraph, ModelInput, PrecisionPlan};
use crate::harness::decode::{decode_and_nms, Detection};
use crate::harness::detector::{build_toy_detector, init_bn_from_data, split_head_output, DetectorConfig};
use crate::harness::metrics::{evaluate_detections, pearson, EvalResult};
use crate::harness::objective::DetectionObjective;
use crate::harness::pillar::pillarize;
use crate::harness::scene::{generate_dataset, DatasetConfig, Difficulty, Scene, NUM_CLASSES};
use crate::latency::{estimate_plan, speedup, LatencyTable};
use crate::qat::{train_fp32, train_qat, Optimizer, TrainConfig, TrainOutcome};
use crate::quant::{DtypeTag, Granularity};
use crate::sensitivity::{greedy_candidates, ranking, select_topk, sweep, LayerSensitivity, SensitivityRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    pub score_thresh: f32,
    pub nms_iou: f32,
    pub iou_match: [f32; NUM_CLASSES],
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            score_thresh: 0.01,
            nms_iou: 0.3,
            iou_match: [0.5; NUM_CLASSES],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    /// Generator settings shared by every split; `size` is ignored.
    pub dataset: DatasetConfig,
    pub detector: DetectorConfig,
    pub train_size: usize,
    pub eval_size: usize,
    /// Scenes calibration sets are drawn from.
    pub pool_size: usize,
    /// Outlier rate of the training split. Outlier points dominate the
    /// FP32 gradients of the intensity inputs, so training is cleaner without.
    pub train_outlier_rate: f64,
    /// Outlier rate of the evaluation split. The pool always uses
    /// `dataset.outlier_rate`.
    pub eval_outlier_rate: f64,
    pub data_seed: u64,
    pub model_seed: u64,
    /// Training scenes used to initialize BN statistics before folding.
    pub bn_init_samples: usize,
    pub pretrain: TrainConfig,
    pub eval: EvalParams,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            detector: DetectorConfig::default(),
            train_size: 4096,
            eval_size: 1024,
            pool_size: 2048,
            train_outlier_rate: 0.0,
            eval_outlier_rate: 0.0,
            data_seed: 0,
            model_seed: 0,
            bn_init_samples: 64,
            pretrain: TrainConfig {
                learning_rate: 2e-3,
                epochs: 16,
                batch_size: 8,
                seed: 0,
                optimizer: Optimizer::adam(),
                cls_weight: 1.0,
                reg_weight: 2.0,
            },
            eval: EvalParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Eval,
    Pool,
}

impl HarnessConfig {
    /// Generator seed of a split. Splits never share scenes.
    pub fn split_seed(&self, kind: SplitKind) -> u64 {
        let k = match kind {
            SplitKind::Train => 0,
            SplitKind::Eval => 1,
            SplitKind::Pool => 2,
        };
        self.data_seed.wrapping_mul(3).wrapping_add(k)
    }

    pub fn split_config(&self, kind: SplitKind) -> DatasetConfig {
        let size = match kind {
            SplitKind::Train => self.train_size,
            SplitKind::Eval => self.eval_size,
            SplitKind::Pool => self.pool_size,
        };
        let outlier_rate = match kind {
            SplitKind::Train => self.train_outlier_rate,
            SplitKind::Eval => self.eval_outlier_rate,
            SplitKind::Pool => self.dataset.outlier_rate,
        };
        DatasetConfig {
            size,
            outlier_rate,
            ..self.dataset.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub scenes: Vec<Scene>,
    pub inputs: Vec<ModelInput>,
}

impl Split {
    pub fn from_scenes(scenes: Vec<Scene>, detector: &DetectorConfig) -> Self {
        let inputs = scenes
            .iter()
            .map(|s| ModelInput::Pillars(pillarize(s, &detector.pillar)))
            .collect();
        Self { scenes, inputs }
    }
}

#[derive(Debug, Clone)]
pub struct Task {
    pub cfg: HarnessConfig,
    pub train: Split,
    pub eval: Split,
    pub pool: Split,
}

impl Task {
    pub fn prepare(cfg: &HarnessConfig) -> Result<Self> {
        cfg.detector.validate()?;
        let split = |kind| -> Result<Split> {
            let scenes = generate_dataset(&cfg.split_config(kind), cfg.split_seed(kind))?;
            Ok(Split::from_scenes(scenes, &cfg.detector))
        };
        Ok(Self {
            cfg: cfg.clone(),
            train: split(SplitKind::Train)?,
            eval: split(SplitKind::Eval)?,
            pool: split(SplitKind::Pool)?,
        })
    }

    pub fn evaluator(&self) -> DetectionEvaluator<'_> {
        DetectionEvaluator {
            split: &self.eval,
            detector: &self.cfg.detector,
            params: self.cfg.eval,
        }
    }

    pub fn objective(&self, train: &TrainConfig) -> Result<DetectionObjective> {
        DetectionObjective::new(&self.train.scenes, &self.cfg.detector, train.cls_weight, train.reg_weight)
    }
}

/// Builds the detector from `model_seed`, initializes BN statistics on the
/// first training scenes, folds BN and trains in FP32.
pub fn pretrain(task: &Task, evaluator: Option<&dyn Evaluator>) -> Result<TrainOutcome> {
    let g = build_toy_detector(&task.cfg.detector, task.cfg.model_seed)?;
    let n = task.cfg.bn_init_samples.clamp(1, task.train.inputs.len());
    let g = init_bn_from_data(&g, &task.train.inputs[..n])?.fold_all_bn()?;
    let objective = task.objective(&task.cfg.pretrain)?;
    train_fp32(&g, &task.train.inputs, &objective, &task.cfg.pretrain, evaluator)
}

/// Decoded detections per scene. `graph` carries its precision tags.
pub fn predict(
    graph: &ModelGraph,
    stats: Option<&CalibrationStats>,
    inputs: &[ModelInput],
    detector: &DetectorConfig,
    params: &EvalParams,
) -> Result<Vec<Vec<Detection>>> {
    inputs
        .iter()
        .map(|x| {
            let out = forward(graph, x, stats)?.output;
            let (cls, reg) = split_head_output(&out)?;
            decode_and_nms(&cls, &reg, detector.output_cell(), params.score_thresh, params.nms_iou)
        })
        .collect()
}

/// Scores `graph` on a split; mAP is the evaluator score.
#[derive(Debug, Clone, Copy)]
pub struct DetectionEvaluator<'a> {
    pub split: &'a Split,
    pub detector: &'a DetectorConfig,
    pub params: EvalParams,
}

impl DetectionEvaluator<'_> {
    pub fn full(&self, graph: &ModelGraph, stats: Option<&CalibrationStats>) -> Result<EvalResult> {
        let dets = predict(graph, stats, &self.split.inputs, self.detector, &self.params)?;
        let gts: Vec<_> = self.split.scenes.iter().map(|s| s.boxes.clone()).collect();
        evaluate_detections(&dets, &gts, self.params.iou_match)
    }
}

impl Evaluator for DetectionEvaluator<'_> {
    fn evaluate(&self, graph: &ModelGraph, stats: Option<&CalibrationStats>) -> Result<f64> {
        Ok(self.full(graph, stats)?.map)
    }
}

/// Applies `plan` and evaluates it with `stats`.
pub fn evaluate_plan(
    graph: &ModelGraph,
    plan: &PrecisionPlan,
    stats: Option<&CalibrationStats>,
    evaluator: &DetectionEvaluator<'_>,
) -> Result<EvalResult> {
    evaluator.full(&apply_plan(graph, plan)?, stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub seed: u64,
    /// Largest `|x|` seen at the first layer's input.
    pub first_layer_max: f32,
    pub map: f64,
    /// Moderate-style mAP at easy, moderate and hard.
    pub map_by_difficulty: [Option<f64>; 3],
}

/// Calibrates `plan` on `n` pool scenes per `(n, seed)` and evaluates the
/// full AP table.
pub fn calibration_curve(
    graph: &ModelGraph,
    plan: &PrecisionPlan,
    task: &Task,
    sizes: &[usize],
    seeds: &[u64],
    sampling: Sampling,
    granularity: Granularity,
) -> Result<Vec<CurvePoint>> {
    let g = apply_plan(graph, plan)?;
    let ev = task.evaluator();
    let first = g.layers().next().map(|l| l.index).ok_or_else(|| Error::invalid("graph has no layers"))?;
    let mut out = Vec::with_capacity(sizes.len() * seeds.len());
    for &n in sizes {
        for &seed in seeds {
            let set = select_calib_set(task.pool.inputs.len(), n, seed, sampling)?;
            let stats = calibrate_on(&g, &task.pool.inputs, &set, granularity)?;
            let r = ev.full(&g, Some(&stats))?;
            out.push(CurvePoint {
                n,
                seed,
                first_layer_max: stats.layer(first).map_or(0.0, |l| l.activation.max_abs()),
                map: r.map,
                map_by_difficulty: Difficulty::ALL.map(|d| r.map_at(d)),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub n: usize,
    pub map_mean: f64,
    pub map_std: f64,
    pub first_layer_max_mean: f64,
    pub by_difficulty_mean: [f64; 3],
}

/// Seed means per calibration size, in size order. Difficulty strata absent
/// from the evaluation split are an error.
pub fn summarize_curve(points: &[CurvePoint]) -> Result<Vec<CurveSummary>> {
    let mut sizes: Vec<usize> = points.iter().map(|p| p.n).collect();
    sizes.dedup();
    sizes
        .into_iter()
        .map(|n| {
            let at: Vec<&CurvePoint> = points.iter().filter(|p| p.n == n).collect();
            let (map_mean, map_std) = mean_std(&at.iter().map(|p| p.map).collect::<Vec<_>>());
            let mut by = [0.0; 3];
            for (k, slot) in by.iter_mut().enumerate() {
                let v = at
                    .iter()
                    .map(|p| p.map_by_difficulty[k].ok_or_else(|| Error::invalid(format!("no {} ground truth", Difficulty::ALL[k]))))
                    .collect::<Result<Vec<_>>>()?;
                *slot = mean_std(&v).0;
            }
            Ok(CurveSummary {
                n,
                map_mean,
                map_std,
                first_layer_max_mean: at.iter().map(|p| p.first_layer_max as f64).sum::<f64>() / at.len() as f64,
                by_difficulty_mean: by,
            })
        })
        .collect()
}

/// Pearson r between the seed-mean curves of every pair of difficulties.
pub fn difficulty_correlations(summary: &[CurveSummary]) -> Result<Vec<(Difficulty, Difficulty, f64)>> {
    let curve = |k: usize| summary.iter().map(|s| s.by_difficulty_mean[k]).collect::<Vec<_>>();
    let mut out = Vec::new();
    for a in 0..3 {
        for b in a + 1..3 {
            out.push((Difficulty::ALL[a], Difficulty::ALL[b], pearson(&curve(a), &curve(b))?));
        }
    }
    Ok(out)
}

pub fn curve_to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("n,seed,first_layer_max,map,map_easy,map_moderate,map_hard\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.n,
            p.seed,
            p.first_layer_max,
            p.map,
            cell(p.map_by_difficulty[0]),
            cell(p.map_by_difficulty[1]),
            cell(p.map_by_difficulty[2])
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub n_calib: usize,
    /// One sensitivity sweep per seed; the first also calibrates the
    /// finalized plans.
    pub calib_seeds: Vec<u64>,
    pub k: usize,
    pub granularity: Granularity,
    /// Fine-tune INT8 and every candidate with these settings.
    pub qat: Option<TrainConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_calib: 4,
            calib_seeds: vec![0],
            k: 3,
            granularity: Granularity::PerTensor,
            qat: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Baseline,
    Candidate,
    Qat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRow {
    pub label: String,
    pub kind: RowKind,
    pub plan: String,
    pub map: Option<f64>,
    pub eval: Option<EvalResult>,
    pub end_to_end_ms: Option<f64>,
    pub speedup_vs_fp32: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub records: Vec<SensitivityRecord>,
    pub ranking: Vec<LayerSensitivity>,
    pub topk: Vec<usize>,
    pub rows: Vec<PipelineRow>,
    pub latency_device: Option<String>,
    /// False when any stage failed; failed rows carry `error`.
    pub complete: bool,
}

impl PipelineReport {
    pub fn row(&self, label: &str) -> Option<&PipelineRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Rows by descending mAP (failed rows last), with their rank.
    pub fn to_csv(&self) -> String {
        let mut order: Vec<&PipelineRow> = self.rows.iter().collect();
        order.sort_by(|a, b| match (a.map, b.map) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        });
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("rank,label,kind,plan,map,end_to_end_ms,speedup_vs_fp32,error\n");
        for (i, r) in order.iter().enumerate() {
            let kind = match r.kind {
                RowKind::Baseline => "baseline",
                RowKind::Candidate => "candidate",
                RowKind::Qat => "qat",
            };
            out.push_str(&format!(
                "{},\"{}\",{kind},\"{}\",{},{},{},\"{}\"\n",
                i + 1,
                r.label,
                r.plan,
                opt(r.map),
                opt(r.end_to_end_ms),
                opt(r.speedup_vs_fp32),
                r.error.as_deref().unwrap_or("").replace('"', "'")
            ));
        }
        out
    }
}

/// Sweep → top-k → greedy candidates → PTQ (and optional QAT) → evaluation →
/// latency estimate. Stage failures are recorded and the run continues
/// where it can.
pub fn run_pipeline(graph: &ModelGraph, task: &Task, cfg: &PipelineConfig, table: Option<&LatencyTable>) -> Result<PipelineReport> {
    if cfg.calib_seeds.is_empty() {
        return Err(Error::invalid("the pipeline needs at least one calibration seed"));
    }
    let ev = task.evaluator();
    let sets = cfg
        .calib_seeds
        .iter()
        .map(|&s| select_calib_set(task.pool.inputs.len(), cfg.n_calib, s, Sampling::Independent))
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    for set in &sets {
        records.extend(sweep(graph, &task.pool.inputs, set, cfg.granularity, &ev)?.into_result()?);
    }
    let ranked = ranking(&records)?;
    let topk = select_topk(&records, cfg.k)?;
    let candidates = greedy_candidates(&topk, cfg.k)?;
    let stats = calibrate_on(graph, &task.pool.inputs, &sets[0], cfg.granularity)?;

    let fp32 = table.map(|t| estimate_plan(t, &PrecisionPlan::uniform(DtypeTag::Fp32))).transpose()?;
    let latency = |plan: &PrecisionPlan| -> (Option<f64>, Option<f64>) {
        match (table, &fp32) {
            (Some(t), Some(base)) => match estimate_plan(t, plan) {
                Ok(r) => (Some(r.end_to_end_ms), speedup(base.end_to_end_ms, r.end_to_end_ms).ok()),
                Err(_) => (None, None),
            },
            _ => (None, None),
        }
    };
    let mut rows = Vec::new();
    let mut push = |label: String, kind, plan: &PrecisionPlan, outcome: Result<EvalResult>| {
        let (end_to_end_ms, speedup_vs_fp32) = latency(plan);
        let (eval, error) = match outcome {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        rows.push(PipelineRow {
            label,
            kind,
            plan: plan.to_string(),
            map: eval.as_ref().map(|r| r.map),
            eval,
            end_to_end_ms,
            speedup_vs_fp32,
            error,
        });
    };

    for (label, dtype) in [("FP32", DtypeTag::Fp32), ("FP16", DtypeTag::Fp16), ("INT8", DtypeTag::Int8)] {
        let plan = PrecisionPlan::uniform(dtype);
        let stats = (dtype == DtypeTag::Int8).then_some(&stats);
        push(label.into(), RowKind::Baseline, &plan, evaluate_plan(graph, &plan, stats, &ev));
    }
    for c in &candidates {
        push(c.label(), RowKind::Candidate, &c.plan, evaluate_plan(graph, &c.plan, Some(&stats), &ev));
    }
    if let Some(train) = &cfg.qat {
        let objective = task.objective(train)?;
        let int8 = PrecisionPlan::uniform(DtypeTag::Int8);
        let plans = std::iter::once(("INT8".to_string(), int8)).chain(candidates.iter().map(|c| (c.label(), c.plan.clone())));
        for (label, plan) in plans {
            let outcome = train_qat(graph, &plan, &stats, &task.train.inputs, &objective, train, None)
                .and_then(|o| ev.full(&o.graph, Some(&stats)));
            push(format!("QAT {label}"), RowKind::Qat, &plan, outcome);
        }
    }
    let complete = rows.iter().all(|r| r.error.is_none());
    Ok(PipelineReport {
        config: cfg.clone(),
        records,
        ranking: ranked,
        topk,
        rows,
        latency_device: table.map(|t| t.device.clone()),
        complete,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> HarnessConfig {
        let mut cfg = HarnessConfig {
            train_size: 24,
            eval_size: 16,
            pool_size: 32,
            ..HarnessConfig::default()
        };
        cfg.detector.stage_widths = [8, 8];
        cfg.detector.stage_depth = [1, 1];
        cfg.detector.neck_width = 8;
        cfg.detector.neck_depth = 1;
        cfg.detector.pfn_width = 8;
        cfg.pretrain.epochs = 2;
        cfg
    }

    #[test]
    fn detector_gradients_match_finite_differences() {
        use crate::qat::{backward, Objective};
        let task = Task::prepare(&tiny_config()).unwrap();
        let g = build_toy_detector(&task.cfg.detector, 3).unwrap().fold_all_bn().unwrap();
        let obj = task.objective(&task.cfg.pretrain).unwrap();
        let x = &task.train.inputs[0];
        let (_, grads) = backward(&g, x, None, |out| obj.loss_and_grad(0, out)).unwrap();
        let loss = |g: &ModelGraph| obj.loss_and_grad(0, &forward(g, x, None).unwrap().output).unwrap().0;
        let n = g.num_layers();
        // first encoder weight, a backbone weight, both head biases
        for (li, at, is_bias) in [(0, 9, false), (1, 5, false), (n - 2, 1, true), (n - 1, 2, true), (n - 3, 0, true)] {
            let h = 1e-3f32;
            let bump = |d: f32| {
                let mut g2 = g.clone();
                let l = g2.layers_mut().nth(li).unwrap();
                let t = if is_bias { &mut l.bias } else { &mut l.weight };
                t.data_mut()[at] += d;
                loss(&g2)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h as f64);
            let an = if is_bias { grads.bias[li].data()[at] } else { grads.weight[li].data()[at] } as f64;
            assert!((fd - an).abs() < 2e-2 * (1e-3 + an.abs().max(fd.abs())), "layer {li} at {at}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let cfg = tiny_config();
        let a = Task::prepare(&cfg).unwrap();
        let b = Task::prepare(&cfg).unwrap();
        assert_eq!(a.train.scenes, b.train.scenes);
        assert_ne!(a.train.scenes[0], a.eval.scenes[0]);
        assert_ne!(a.eval.scenes[0], a.pool.scenes[0]);
        assert_eq!(a.pool.inputs.len(), 32);
    }

    #[test]
    fn pretraining_reduces_loss_and_is_reproducible() {
        let task = Task::prepare(&tiny_config()).unwrap();
        let a = pretrain(&task, None).unwrap();
        let b = pretrain(&task, None).unwrap();
        assert_eq!(a.graph.weight_hash(), b.graph.weight_hash());
        assert!(a.history[1].loss < a.history[0].loss, "{:?}", a.history);
    }

    #[test]
    fn evaluation_is_deterministic_and_in_range() {
        let task = Task::prepare(&tiny_config()).unwrap();
        let g = pretrain(&task, None).unwrap().graph;
        let ev = task.evaluator();
        let r = ev.full(&g, None).unwrap();
        assert_eq!(r, ev.full(&g, None).unwrap());
        for e in &r.entries {
            assert!(e.ap40.is_none_or(|v| (0.0..=100.0).contains(&v)));
        }
        assert!((0.0..=100.0).contains(&r.map));
    }

    #[test]
    fn pipeline_rows_follow_the_candidate_structure() {
        let task = Task::prepare(&tiny_config()).unwrap();
        let g = pretrain(&task, None).unwrap().graph;
        let table = crate::latency::builtin_table("jetson_orin").unwrap();
        let cfg = PipelineConfig {
            k: 1,
            ..PipelineConfig::default()
        };
        let r = run_pipeline(&g, &task, &cfg, Some(&table)).unwrap();
        let labels: Vec<&str> = r.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels.len(), 4);
        assert_eq!(&labels[..3], &["FP32", "FP16", "INT8"]);
        assert!(labels[3].starts_with("FP16: "));
        assert!(r.complete);
        assert_eq!(r.row("FP32").unwrap().speedup_vs_fp32, Some(1.0));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 5);
        let again = run_pipeline(&g, &task, &cfg, Some(&table)).unwrap();
        assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn curve_summary_and_correlations() {
        let task = Task::prepare(&tiny_config()).unwrap();
        let g = pretrain(&task, None).unwrap().graph;
        let pts = calibration_curve(&g, &PrecisionPlan::uniform(DtypeTag::Int8), &task, &[2, 8], &[0, 1], Sampling::Nested, Granularity::PerTensor).unwrap();
        assert_eq!(pts.len(), 4);
        assert!(pts[2].first_layer_max >= pts[0].first_layer_max);
        assert_eq!(curve_to_csv(&pts).lines().count(), 5);
    }
}
