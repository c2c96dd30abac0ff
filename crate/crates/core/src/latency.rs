//! Additive latency cost model: per-layer, per-dtype milliseconds plus a
//! uniform penalty per Q/DQ boundary and a per-device constant for the work
//! the layer table does not cover.
//!
//! Two devices ship as built-in fixtures. Their penalty and constant are
//! least-squares fits against the end-to-end fixture, not measurements.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationStats;
use crate::error::{Error, Result};
use crate::graph::{apply_plan, count_boundaries, execute, Exec, ModelGraph, ModelInput, PrecisionPlan};
use crate::quant::DtypeTag;

const HEADER: &str = "layer,name,fp32_ms,fp16_ms,int8_ms";

const BUILTIN: &[(&str, &str)] = &[
    ("jetson_orin", include_str!("../fixtures/latency_table_jetson_orin.csv")),
    ("rtx_4070ti", include_str!("../fixtures/latency_table_rtx_4070ti.csv")),
];

const END_TO_END: &str = include_str!("../fixtures/end_to_end.csv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLatency {
    pub layer: usize,
    pub name: String,
    pub fp32_ms: f64,
    pub fp16_ms: f64,
    pub int8_ms: f64,
}

impl LayerLatency {
    pub fn ms(&self, dtype: DtypeTag) -> f64 {
        match dtype {
            DtypeTag::Fp32 => self.fp32_ms,
            DtypeTag::Fp16 => self.fp16_ms,
            DtypeTag::Int8 => self.int8_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub device: String,
    pub rows: Vec<LayerLatency>,
    pub boundary_penalty_ms: f64,
    pub constant_ms: f64,
    /// Penalty and constant come from a fit rather than a measurement.
    pub fitted: bool,
}

impl LatencyTable {
    /// Parses the fixture CSV. `#` lines may set `device`,
    /// `boundary_penalty_ms`, `constant_ms` and `fitted`.
    pub fn parse(text: &str, device: &str) -> Result<Self> {
        let mut table = LatencyTable {
            device: device.to_string(),
            rows: Vec::new(),
            boundary_penalty_ms: 0.0,
            constant_ms: 0.0,
            fitted: false,
        };
        let mut header_seen = false;
        for (ln, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((key, value)) = meta.split_once(':') {
                    let value = value.trim();
                    let num = || {
                        value
                            .parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite() && *v >= 0.0)
                            .ok_or_else(|| Error::Format(format!("line {ln}: `{}` must be a non-negative number", key.trim())))
                    };
                    match key.trim() {
                        "device" => table.device = value.to_string(),
                        "boundary_penalty_ms" => table.boundary_penalty_ms = num()?,
                        "constant_ms" => table.constant_ms = num()?,
                        "fitted" => table.fitted = value == "true",
                        _ => {}
                    }
                }
                continue;
            }
            if !header_seen {
                if line != HEADER {
                    return Err(Error::Format(format!("line {ln}: expected header `{HEADER}`, got `{line}`")));
                }
                header_seen = true;
                continue;
            }
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != 5 || cells.iter().any(|c| c.is_empty()) {
                return Err(Error::Format(format!("line {ln}: expected 5 non-empty cells, got `{line}`")));
            }
            let layer: usize = cells[0]
                .parse()
                .map_err(|_| Error::Format(format!("line {ln}: bad layer index `{}`", cells[0])))?;
            let ms = |i: usize| -> Result<f64> {
                let v: f64 = cells[i]
                    .parse()
                    .map_err(|_| Error::Format(format!("line {ln}: bad latency `{}`", cells[i])))?;
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Format(format!("line {ln}: latency {v} must be positive")));
                }
                Ok(v)
            };
            if layer != table.rows.len() + 1 {
                return Err(Error::Format(format!(
                    "line {ln}: layer {layer} out of order (expected {})",
                    table.rows.len() + 1
                )));
            }
            table.rows.push(LayerLatency {
                layer,
                name: cells[1].to_string(),
                fp32_ms: ms(2)?,
                fp16_ms: ms(3)?,
                int8_ms: ms(4)?,
            });
        }
        if table.rows.is_empty() {
            return Err(Error::Format("latency table has no rows".into()));
        }
        Ok(table)
    }

    pub fn num_layers(&self) -> usize {
        self.rows.len()
    }

    pub fn ms(&self, layer: usize, dtype: DtypeTag) -> Result<f64> {
        self.rows
            .get(layer.wrapping_sub(1))
            .map(|r| r.ms(dtype))
            .ok_or_else(|| Error::LatencyMissing {
                device: self.device.clone(),
                layer,
                dtype,
            })
    }

    pub fn column_sum(&self, dtype: DtypeTag) -> f64 {
        self.rows.iter().map(|r| r.ms(dtype)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# device: {}\n# boundary_penalty_ms: {}\n# constant_ms: {}\n# fitted: {}\n{HEADER}\n",
            self.device, self.boundary_penalty_ms, self.constant_ms, self.fitted
        );
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.layer, r.name, r.fp32_ms, r.fp16_ms, r.int8_ms);
        }
        out
    }
}

/// Loads `path`; the device defaults to the `latency_table_<device>.csv` stem.
pub fn load_table(path: &Path) -> Result<LatencyTable> {
    let text = fs::read_to_string(path)?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let device = stem.strip_prefix("latency_table_").unwrap_or(&stem);
    LatencyTable::parse(&text, device)
}

pub fn builtin_devices() -> Vec<&'static str> {
    BUILTIN.iter().map(|(d, _)| *d).collect()
}

pub fn builtin_table(device: &str) -> Result<LatencyTable> {
    let (name, text) = BUILTIN.iter().find(|(d, _)| *d == device).ok_or_else(|| {
        Error::invalid(format!(
            "no latency fixture for device `{device}` (available: {})",
            builtin_devices().join(", ")
        ))
    })?;
    LatencyTable::parse(text, name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub dtype: DtypeTag,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanLatencyReport {
    pub device: String,
    pub plan: String,
    pub per_layer: Vec<LayerCost>,
    pub boundaries: usize,
    pub boundary_penalty_ms: f64,
    /// `Σ per_layer + boundaries · boundary_penalty_ms`.
    pub total_ms: f64,
    pub constant_ms: f64,
    /// `total_ms + constant_ms`; comparable with end-to-end measurements.
    pub end_to_end_ms: f64,
    pub penalty_and_constant_fitted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
}

/// Estimates `plan` over every layer of `table` (and any layer the plan
/// names beyond it, which then fails as uncovered).
pub fn estimate_plan(table: &LatencyTable, plan: &PrecisionPlan) -> Result<PlanLatencyReport> {
    let n = plan.overrides.keys().copied().max().unwrap_or(0).max(table.num_layers());
    let dtypes = plan.dtypes(n);
    let per_layer = dtypes
        .iter()
        .enumerate()
        .map(|(i, &dtype)| {
            Ok(LayerCost {
                layer: i + 1,
                dtype,
                ms: table.ms(i + 1, dtype)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let boundaries = count_boundaries(&dtypes);
    let layer_sum: f64 = per_layer.iter().map(|c| c.ms).sum();
    let total_ms = layer_sum + boundaries as f64 * table.boundary_penalty_ms;
    Ok(PlanLatencyReport {
        device: table.device.clone(),
        plan: plan.to_string(),
        per_layer,
        boundaries,
        boundary_penalty_ms: table.boundary_penalty_ms,
        total_ms,
        constant_ms: table.constant_ms,
        end_to_end_ms: total_ms + table.constant_ms,
        penalty_and_constant_fitted: table.fitted,
        baseline: None,
        speedup: None,
    })
}

pub fn speedup(baseline_ms: f64, candidate_ms: f64) -> Result<f64> {
    if !(baseline_ms > 0.0 && candidate_ms > 0.0) || !baseline_ms.is_finite() || !candidate_ms.is_finite() {
        return Err(Error::invalid(format!(
            "speedup needs positive latencies, got {baseline_ms} and {candidate_ms}"
        )));
    }
    Ok(baseline_ms / candidate_ms)
}

/// One measured end-to-end mean latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndToEnd {
    pub device: String,
    pub plan: PrecisionPlan,
    pub label: String,
    pub ms: f64,
}

/// Parses `device,"plan label",ms` rows.
pub fn parse_end_to_end(text: &str) -> Result<Vec<EndToEnd>> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.is_empty() || line.starts_with('#') || line == "device,plan,ms" {
            continue;
        }
        let bad = || Error::Format(format!("line {ln}: expected `device,plan,ms`, got `{line}`"));
        let (device, rest) = line.split_once(',').ok_or_else(bad)?;
        let (label, ms) = rest.rsplit_once(',').ok_or_else(bad)?;
        let label = label.trim().trim_matches('"').to_string();
        let ms: f64 = ms.trim().parse().map_err(|_| bad())?;
        if !(ms > 0.0) {
            return Err(bad());
        }
        rows.push(EndToEnd {
            device: device.trim().to_string(),
            plan: label.parse()?,
            label,
            ms,
        });
    }
    Ok(rows)
}

pub fn builtin_end_to_end(device: &str) -> Result<Vec<EndToEnd>> {
    let rows: Vec<EndToEnd> = parse_end_to_end(END_TO_END)?.into_iter().filter(|r| r.device == device).collect();
    if rows.is_empty() {
        return Err(Error::invalid(format!("no end-to-end measurements for device `{device}`")));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyFit {
    pub boundary_penalty_ms: f64,
    pub constant_ms: f64,
    /// `measured − predicted` per row, in input order.
    pub residuals: Vec<f64>,
}

/// Least-squares fit of `measured − Σ layers = penalty·boundaries + constant`.
/// The penalty is constrained to be non-negative.
pub fn fit_penalty(table: &LatencyTable, rows: &[EndToEnd]) -> Result<PenaltyFit> {
    if rows.is_empty() {
        return Err(Error::invalid("penalty fit needs at least one measurement"));
    }
    let mut xs = Vec::with_capacity(rows.len());
    let mut ys = Vec::with_capacity(rows.len());
    for r in rows {
        let est = estimate_plan(&LatencyTable { boundary_penalty_ms: 0.0, ..table.clone() }, &r.plan)?;
        xs.push(est.boundaries as f64);
        ys.push(r.ms - est.total_ms);
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let penalty = if sxx > 0.0 { (sxy / sxx).max(0.0) } else { 0.0 };
    let constant = my - penalty * mx;
    let residuals = xs.iter().zip(&ys).map(|(x, y)| y - penalty * x - constant).collect();
    Ok(PenaltyFit {
        boundary_penalty_ms: penalty,
        constant_ms: constant,
        residuals,
    })
}

/// Wall-clock per-layer table for `graph` on this machine: each uniform
/// dtype is run `warmup` times, then timed over `runs` passes. A layer's
/// time includes the glue nodes that follow it. Relative use only.
pub fn measure_table(
    graph: &ModelGraph,
    input: &ModelInput,
    stats: &CalibrationStats,
    warmup: usize,
    runs: usize,
    device: &str,
) -> Result<LatencyTable> {
    if runs == 0 {
        return Err(Error::invalid("measurement needs at least one timed run"));
    }
    let n = graph.num_layers();
    let mut cols = [vec![0.0f64; n], vec![0.0f64; n], vec![0.0f64; n]];
    for (col, dtype) in cols.iter_mut().zip(DtypeTag::ALL) {
        let g = apply_plan(graph, &PrecisionPlan::uniform(dtype))?;
        for pass in 0..warmup + runs {
            let mut marks: Vec<(usize, Instant)> = Vec::with_capacity(n + 1);
            execute(
                &g,
                input,
                Exec::Tagged(Some(stats)),
                &mut |l, _| {
                    marks.push((l.index, Instant::now()));
                    Ok(())
                },
                None,
            )?;
            let end = Instant::now();
            if pass < warmup {
                continue;
            }
            for (k, (index, start)) in marks.iter().enumerate() {
                let stop = marks.get(k + 1).map_or(end, |m| m.1);
                col[index - 1] += stop.duration_since(*start).as_secs_f64() * 1e3;
            }
        }
    }
    let rows = graph
        .layers()
        .map(|l| {
            let i = l.index - 1;
            let avg = |c: &Vec<f64>| (c[i] / runs as f64).max(1e-6);
            LayerLatency {
                layer: l.index,
                name: l.name.clone(),
                fp32_ms: avg(&cols[0]),
                fp16_ms: avg(&cols[1]),
                int8_ms: avg(&cols[2]),
            }
        })
        .collect();
    Ok(LatencyTable {
        device: device.to_string(),
        rows,
        boundary_penalty_ms: 0.0,
        constant_ms: 0.0,
        fitted: false,
    })
}
