use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use mpq_core::calibration::{calib_size_sweep, calibrate_on, summarize_sweep, sweep_rows_to_csv, SizeSummary};
use mpq_core::harness::dataset_io::{load_dataset, save_dataset, DatasetManifest};
use mpq_core::harness::experiments::{evaluate_plan, pretrain, run_pipeline, Split, SplitKind};
use mpq_core::harness::metrics::EvalResult;
use mpq_core::harness::scene::generate_dataset;
use mpq_core::harness::Task;
use mpq_core::latency::{builtin_end_to_end, builtin_table, load_table};
use mpq_core::qat::{history_to_csv, EpochRecord};
use mpq_core::sensitivity::{ranking, records_to_csv, LayerSensitivity, SensitivityRecord, SweepReport};
use mpq_core::{
    apply_plan, estimate_plan, greedy_candidates, load_model, save_model, select_calib_set, select_topk, speedup, sweep,
    train_qat, CalibrationStats, CandidatePlan, DtypeTag, LatencyTable, ModelGraph, PlanLatencyReport, PrecisionPlan,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{CalibArgs, Cli, CliError, Command, ModelArg, SplitArg};

/// What a successful invocation produced. `complete` is false when a stage
/// failed but a partial report was still written.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub complete: bool,
    pub files: Vec<PathBuf>,
}

/// Every JSON report: the command, the resolved config and the payload.
#[derive(Debug, Serialize, Deserialize)]
pub struct Report<T> {
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub result: T,
}

#[derive(Debug, Serialize)]
struct Meta<'a> {
    command: &'a str,
    started_unix_s: u64,
    elapsed_ms: u128,
    complete: bool,
}

struct Ctx<'a> {
    cfg: RunConfig,
    out: &'a Path,
    data: Option<&'a Path>,
    command: &'static str,
    files: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|source| CliError::Io { path: path.clone(), source })?;
        self.files.push(path);
        Ok(())
    }

    fn write_report<T: Serialize>(&mut self, name: &str, result: T) -> Result<(), CliError> {
        let report = Report {
            command: self.command.to_string(),
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            result,
        };
        let text = serde_json::to_string_pretty(&report).map_err(mpq_core::Error::from)? + "\n";
        self.write_text(name, &text)
    }

    fn model_path(&self, arg: &ModelArg) -> PathBuf {
        arg.model.clone().unwrap_or_else(|| self.path("model"))
    }

    fn load_model(&self, arg: &ModelArg) -> Result<ModelGraph, CliError> {
        let path = self.model_path(arg);
        load_model(&path).map_err(|e| match e {
            mpq_core::Error::Io(source) => CliError::Io { path, source },
            other => other.into(),
        })
    }

    /// Splits from `--data` where a file exists, generated otherwise.
    fn task(&self) -> Result<Task, CliError> {
        let h = &self.cfg.harness;
        h.detector.validate()?;
        let split = |kind: SplitKind, name: &str| -> Result<Split, CliError> {
            let file = self.data.map(|d| d.join(format!("{name}.jsonl")));
            let scenes = match file {
                Some(f) if f.exists() => load_dataset(&f)?.0,
                _ => generate_dataset(&h.split_config(kind), h.split_seed(kind))?,
            };
            Ok(Split::from_scenes(scenes, &h.detector))
        };
        Ok(Task {
            cfg: h.clone(),
            train: split(SplitKind::Train, "train")?,
            eval: split(SplitKind::Eval, "eval")?,
            pool: split(SplitKind::Pool, "pool")?,
        })
    }

    fn calibrate(&self, graph: &ModelGraph, task: &Task, calib: &CalibArgs, seed: u64) -> Result<CalibrationStats, CliError> {
        let n = calib.n.unwrap_or(self.cfg.pipeline.n_calib);
        let sampling = calib.sampling.map(Into::into).unwrap_or_default();
        let granularity = calib.granularity.map(Into::into).unwrap_or(self.cfg.pipeline.granularity);
        let set = select_calib_set(task.pool.inputs.len(), n, seed, sampling)?;
        Ok(calibrate_on(graph, &task.pool.inputs, &set, granularity)?)
    }

    fn stats_or_calibrate(
        &self,
        stats: Option<&Path>,
        graph: &ModelGraph,
        task: &Task,
        calib: &CalibArgs,
    ) -> Result<CalibrationStats, CliError> {
        match stats {
            Some(p) => Ok(CalibrationStats::load(p)?),
            None => {
                let seed = self.cfg.pipeline.calib_seeds.first().copied().unwrap_or(0);
                self.calibrate(graph, task, calib, seed)
            }
        }
    }

    fn latency_table(&self, device: Option<&str>, table: Option<&Path>) -> Result<LatencyTable, CliError> {
        match table {
            Some(p) => Ok(load_table(p)?),
            None => Ok(builtin_table(device.unwrap_or(&self.cfg.latency_device))?),
        }
    }
}

fn parse_plan(s: &str) -> Result<PrecisionPlan, CliError> {
    s.parse().map_err(|e: mpq_core::Error| CliError::Usage(format!("plan `{s}`: {e}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainResult {
    pub weight_hash: String,
    pub history: Vec<EpochRecord>,
    pub eval: EvalResult,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepResult {
    pub sweeps: Vec<SweepReport>,
    pub ranking: Vec<LayerSensitivity>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlanCandidate {
    pub label: String,
    pub plan: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PlanResult {
    pub k: usize,
    pub topk: Vec<usize>,
    pub candidates: Vec<PlanCandidate>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QatResult {
    pub plan: String,
    pub ptq: EvalResult,
    pub qat: EvalResult,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LatencyRow {
    pub estimate: PlanLatencyReport,
    /// Fixture measurement for the same plan, when one exists.
    pub measured_ms: Option<f64>,
    pub measured_speedup: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CalibSweepResult {
    pub plan: String,
    pub probe_layer: usize,
    pub summary: Vec<SizeSummary>,
}

/// Runs the parsed command line; reports go to `cli.out`.
pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    fs::create_dir_all(&cli.out).map_err(|source| CliError::Io {
        path: cli.out.clone(),
        source,
    })?;
    let mut ctx = Ctx {
        cfg,
        out: &cli.out,
        data: cli.data.as_deref(),
        command: cli.command.name(),
        files: Vec::new(),
    };
    let complete = dispatch(&mut ctx, &cli.command)?;
    let meta = Meta {
        command: ctx.command,
        started_unix_s: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
            .saturating_sub(started.elapsed().as_secs()),
        elapsed_ms: started.elapsed().as_millis(),
        complete,
    };
    let meta_name = format!("{}.meta.json", ctx.command);
    let text = serde_json::to_string_pretty(&meta).map_err(mpq_core::Error::from)? + "\n";
    let path = ctx.path(&meta_name);
    fs::write(&path, text).map_err(|source| CliError::Io { path, source })?;
    Ok(Outcome { complete, files: ctx.files })
}

fn dispatch(ctx: &mut Ctx<'_>, command: &Command) -> Result<bool, CliError> {
    match command {
        Command::GenData {
            split,
            size,
            outlier_rate,
        } => {
            let kinds: &[(SplitKind, &str)] = match split {
                SplitArg::Train => &[(SplitKind::Train, "train")],
                SplitArg::Eval => &[(SplitKind::Eval, "eval")],
                SplitArg::Pool => &[(SplitKind::Pool, "pool")],
                SplitArg::All => &[(SplitKind::Train, "train"), (SplitKind::Eval, "eval"), (SplitKind::Pool, "pool")],
            };
            let mut manifests: Vec<DatasetManifest> = Vec::new();
            for &(kind, name) in kinds {
                let mut dcfg = ctx.cfg.harness.split_config(kind);
                if let Some(n) = size {
                    dcfg.size = *n;
                }
                if let Some(r) = outlier_rate {
                    dcfg.outlier_rate = *r;
                }
                let seed = ctx.cfg.harness.split_seed(kind);
                let scenes = generate_dataset(&dcfg, seed)?;
                let path = ctx.path(&format!("{name}.jsonl"));
                manifests.push(save_dataset(&path, &scenes, &dcfg, seed)?);
                ctx.files.push(path.clone());
                ctx.files.push(mpq_core::harness::dataset_io::manifest_path(&path));
            }
            ctx.write_report("gen-data.json", manifests)?;
            Ok(true)
        }
        Command::Train { epochs } => {
            if let Some(e) = epochs {
                ctx.cfg.harness.pretrain.epochs = *e;
            }
            let task = ctx.task()?;
            let ev = task.evaluator();
            let outcome = pretrain(&task, Some(&ev))?;
            let eval = ev.full(&outcome.graph, None)?;
            save_model(&outcome.graph, &ctx.path("model"))?;
            let (json, bin) = mpq_core::model_io::model_paths(&ctx.path("model"));
            ctx.files.extend([json, bin]);
            ctx.write_text("train_history.csv", &history_to_csv(&outcome.history))?;
            ctx.write_report(
                "train.json",
                TrainResult {
                    weight_hash: outcome.graph.weight_hash(),
                    history: outcome.history,
                    eval,
                },
            )?;
            Ok(true)
        }
        Command::Calibrate { model, calib, calib_seed } => {
            let graph = ctx.load_model(model)?;
            let task = ctx.task()?;
            let stats = ctx.calibrate(&graph, &task, calib, *calib_seed)?;
            ctx.write_text("calib-stats.json", &stats.to_json()?)?;
            Ok(true)
        }
        Command::Sweep {
            model,
            calib,
            calib_seeds,
        } => {
            let graph = ctx.load_model(model)?;
            let task = ctx.task()?;
            let seeds = calib_seeds.clone().unwrap_or_else(|| ctx.cfg.pipeline.calib_seeds.clone());
            let n = calib.n.unwrap_or(ctx.cfg.pipeline.n_calib);
            let sampling = calib.sampling.map(Into::into).unwrap_or_default();
            let granularity = calib.granularity.map(Into::into).unwrap_or(ctx.cfg.pipeline.granularity);
            let ev = task.evaluator();
            let mut sweeps = Vec::new();
            for &s in &seeds {
                let set = select_calib_set(task.pool.inputs.len(), n, s, sampling)?;
                sweeps.push(sweep(&graph, &task.pool.inputs, &set, granularity, &ev)?);
            }
            let records: Vec<SensitivityRecord> = sweeps.iter().flat_map(|s| s.records.clone()).collect();
            let complete = records.iter().all(|r| r.error.is_none());
            ctx.write_text("sweep.csv", &records_to_csv(&records))?;
            let ranked = ranking(&records)?;
            ctx.write_report("sweep.json", SweepResult { sweeps, ranking: ranked })?;
            Ok(complete)
        }
        Command::Plan { sweep, k } => {
            let path = sweep.clone().unwrap_or_else(|| ctx.path("sweep.json"));
            let text = fs::read_to_string(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
            let report: Report<SweepResult> =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            let k = k.unwrap_or(ctx.cfg.pipeline.k);
            let records: Vec<SensitivityRecord> = report.result.sweeps.iter().flat_map(|s| s.records.clone()).collect();
            let topk = select_topk(&records, k)?;
            let candidates = greedy_candidates(&topk, k)?
                .iter()
                .map(|c: &CandidatePlan| PlanCandidate {
                    label: c.label(),
                    plan: c.plan.to_string(),
                })
                .collect();
            ctx.write_report("plan.json", PlanResult { k, topk, candidates })?;
            Ok(true)
        }
        Command::Qat {
            model,
            calib,
            plan,
            stats,
            epochs,
            lr,
        } => {
            let plan = parse_plan(plan)?;
            let graph = ctx.load_model(model)?;
            let task = ctx.task()?;
            let stats = ctx.stats_or_calibrate(stats.as_deref(), &graph, &task, calib)?;
            let mut train = ctx.cfg.pipeline.qat.clone().unwrap_or_default();
            if let Some(e) = epochs {
                train.epochs = *e;
            }
            if let Some(lr) = lr {
                train.learning_rate = *lr;
            }
            let ev = task.evaluator();
            let ptq = evaluate_plan(&graph, &plan, Some(&stats), &ev)?;
            let objective = task.objective(&train)?;
            let outcome = train_qat(&graph, &plan, &stats, &task.train.inputs, &objective, &train, None)?;
            let qat = ev.full(&outcome.graph, Some(&stats))?;
            save_model(&outcome.graph, &ctx.path("qat_model"))?;
            let (json, bin) = mpq_core::model_io::model_paths(&ctx.path("qat_model"));
            ctx.files.extend([json, bin]);
            ctx.write_report(
                "qat.json",
                QatResult {
                    plan: plan.to_string(),
                    ptq,
                    qat,
                    history: outcome.history,
                },
            )?;
            Ok(true)
        }
        Command::Eval {
            model,
            calib,
            plan,
            stats,
        } => {
            let plan = parse_plan(plan)?;
            let graph = ctx.load_model(model)?;
            let task = ctx.task()?;
            let applied = apply_plan(&graph, &plan)?;
            let needs_stats = applied.precisions().contains(&DtypeTag::Int8);
            let stats = if needs_stats {
                Some(ctx.stats_or_calibrate(stats.as_deref(), &graph, &task, calib)?)
            } else {
                None
            };
            let result = task.evaluator().full(&applied, stats.as_ref())?;
            ctx.write_report("eval.json", (plan.to_string(), result.keyed()))?;
            Ok(true)
        }
        Command::Latency {
            device,
            table,
            plans,
            baseline,
        } => {
            let table = ctx.latency_table(device.as_deref(), table.as_deref())?;
            let base = estimate_plan(&table, &parse_plan(baseline)?)?;
            let plans: Vec<String> = if plans.is_empty() {
                vec!["FP32".into(), "FP16".into(), "INT8".into()]
            } else {
                plans.clone()
            };
            // measurements exist only for the built-in devices
            let measured = builtin_end_to_end(&table.device).unwrap_or_default();
            let measured_ms = |plan: &PrecisionPlan| measured.iter().find(|m| &m.plan == plan).map(|m| m.ms);
            let base_measured = measured_ms(&parse_plan(baseline)?);
            let mut rows: Vec<LatencyRow> = Vec::new();
            let mut csv = String::from("plan,end_to_end_ms,speedup,measured_ms,measured_speedup\n");
            for p in &plans {
                let plan = parse_plan(p)?;
                let mut r = estimate_plan(&table, &plan)?;
                r.baseline = Some(base.plan.clone());
                r.speedup = Some(speedup(base.end_to_end_ms, r.end_to_end_ms)?);
                let m = measured_ms(&plan);
                let measured_speedup = match (base_measured, m) {
                    (Some(b), Some(c)) => Some(speedup(b, c)?),
                    _ => None,
                };
                let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                csv.push_str(&format!(
                    "\"{}\",{},{},{},{}\n",
                    r.plan,
                    r.end_to_end_ms,
                    opt(r.speedup),
                    opt(m),
                    opt(measured_speedup)
                ));
                rows.push(LatencyRow {
                    estimate: r,
                    measured_ms: m,
                    measured_speedup,
                });
            }
            ctx.write_text("latency.csv", &csv)?;
            ctx.write_report("latency.json", rows)?;
            Ok(true)
        }
        Command::CalibSweep {
            model,
            sizes,
            seeds,
            sampling,
            plan,
        } => {
            let plan = parse_plan(plan)?;
            let graph = apply_plan(&ctx.load_model(model)?, &plan)?;
            let task = ctx.task()?;
            let sizes = sizes.clone().unwrap_or_else(|| ctx.cfg.calib_sweep.sizes.clone());
            let seeds = seeds.clone().unwrap_or_else(|| ctx.cfg.calib_sweep.seeds.clone());
            let sampling = sampling.map(Into::into).unwrap_or(ctx.cfg.calib_sweep.sampling);
            let rows = calib_size_sweep(
                &graph,
                &task.pool.inputs,
                &sizes,
                &seeds,
                sampling,
                ctx.cfg.pipeline.granularity,
                &task.evaluator(),
            )?;
            let probe_layer = graph.layers().next().map_or(1, |l| l.index);
            ctx.write_text("calib_sweep.csv", &sweep_rows_to_csv(&rows))?;
            ctx.write_report(
                "calib_sweep.json",
                CalibSweepResult {
                    plan: plan.to_string(),
                    probe_layer,
                    summary: summarize_sweep(&rows, probe_layer),
                },
            )?;
            Ok(true)
        }
        Command::Pipeline {
            model,
            k,
            n_calib,
            calib_seeds,
            qat,
            device,
        } => {
            let mut pcfg = ctx.cfg.pipeline.clone();
            if let Some(k) = k {
                pcfg.k = *k;
            }
            if let Some(n) = n_calib {
                pcfg.n_calib = *n;
            }
            if let Some(s) = calib_seeds {
                pcfg.calib_seeds = s.clone();
            }
            if *qat && pcfg.qat.is_none() {
                pcfg.qat = Some(Default::default());
            }
            ctx.cfg.pipeline = pcfg.clone();
            let graph = ctx.load_model(model)?;
            let task = ctx.task()?;
            let table = ctx.latency_table(device.as_deref(), None)?;
            let report = run_pipeline(&graph, &task, &pcfg, Some(&table))?;
            ctx.write_text("pipeline.csv", &report.to_csv())?;
            let complete = report.complete;
            ctx.write_report("pipeline.json", report)?;
            Ok(complete)
        }
    }
}
