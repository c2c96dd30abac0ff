//! Min-max calibration: sample selection, FP32 observation passes over the
//! calibration set and the calibration-size sweep.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::Evaluator;
use crate::graph::{execute, Exec, ModelGraph, ModelInput};
use crate::quant::{compute_scale, Granularity, MinMaxObserver, QuantParams, WeightQuant};

/// Calibration frames used by default.
pub const DEFAULT_CALIB_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Each `n` draws its own subset.
    #[default]
    Independent,
    /// The subset for a smaller `n` is a prefix of the one for a larger `n`.
    Nested,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibSet {
    pub indices: Vec<usize>,
    pub seed: u64,
    pub n: usize,
}

impl CalibSet {
    pub fn resolve<'a, T>(&self, dataset: &'a [T]) -> Vec<&'a T> {
        self.indices.iter().map(|&i| &dataset[i]).collect()
    }
}

/// Draws `n` distinct indices from `0..dataset_size`, deterministic in
/// `(dataset_size, n, seed, sampling)`.
pub fn select_calib_set(dataset_size: usize, n: usize, seed: u64, sampling: Sampling) -> Result<CalibSet> {
    if n == 0 || n > dataset_size {
        return Err(Error::invalid(format!(
            "calibration size {n} must be within 1..={dataset_size}"
        )));
    }
    let indices = match sampling {
        Sampling::Independent => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            index::sample(&mut rng, dataset_size, n).into_vec()
        }
        Sampling::Nested => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..dataset_size).collect();
            // Fisher-Yates; prefixes of one permutation give nested sets.
            for i in (1..dataset_size).rev() {
                let j = rand::Rng::random_range(&mut rng, 0..=i);
                perm.swap(i, j);
            }
            perm.truncate(n);
            perm
        }
    };
    Ok(CalibSet { indices, seed, n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCalibration {
    pub activation: MinMaxObserver,
    pub weight: WeightQuant,
    activation_params: QuantParams,
}

impl LayerCalibration {
    pub fn new(activation: MinMaxObserver, weight: WeightQuant) -> Result<Self> {
        let activation_params = activation.quant_params()?;
        Ok(Self {
            activation,
            weight,
            activation_params,
        })
    }

    pub fn activation_params(&self) -> QuantParams {
        self.activation_params
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationStats {
    layers: BTreeMap<usize, LayerCalibration>,
    pub n_samples: usize,
    pub seed: Option<u64>,
    pub granularity: Granularity,
}

impl CalibrationStats {
    pub fn layer(&self, index: usize) -> Option<&LayerCalibration> {
        self.layers.get(&index)
    }

    pub fn layers(&self) -> impl Iterator<Item = (usize, &LayerCalibration)> {
        self.layers.iter().map(|(&i, l)| (i, l))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Combines stats gathered over disjoint sample sets of the same graph.
    pub fn merge(&self, other: &CalibrationStats) -> Result<CalibrationStats> {
        if self.layers.keys().ne(other.layers.keys()) {
            return Err(Error::invalid("cannot merge calibration stats over different layers"));
        }
        let mut layers = BTreeMap::new();
        for (i, a) in &self.layers {
            let b = &other.layers[i];
            if a.weight != b.weight {
                return Err(Error::invalid(format!("layer {i}: weight params differ between merged stats")));
            }
            layers.insert(*i, LayerCalibration::new(a.activation.merge(&b.activation), a.weight.clone())?);
        }
        Ok(CalibrationStats {
            layers,
            n_samples: self.n_samples + other.n_samples,
            seed: self.seed,
            granularity: self.granularity,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = StatsFile {
            seed: self.seed,
            n: self.n_samples,
            granularity: self.granularity,
            layers: self
                .layers
                .iter()
                .map(|(&layer, l)| StatsEntry {
                    layer,
                    min: l.activation.range().map(|r| r.0),
                    max: l.activation.range().map(|r| r.1),
                    count: l.activation.count(),
                    scale: l.activation_params.scale(),
                    weight: l.weight.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: StatsFile = serde_json::from_str(text)?;
        let mut layers = BTreeMap::new();
        for e in file.layers {
            let range = match (e.min, e.max) {
                (Some(lo), Some(hi)) => Some((lo, hi)),
                (None, None) => None,
                _ => return Err(Error::Format(format!("layer {}: min and max must both be set", e.layer))),
            };
            let obs = MinMaxObserver::from_parts(range, e.count)?;
            let entry = LayerCalibration::new(obs, e.weight)?;
            if entry.activation_params.scale() != e.scale {
                return Err(Error::Format(format!(
                    "layer {}: stored scale {} disagrees with min/max (expected {})",
                    e.layer,
                    e.scale,
                    entry.activation_params.scale()
                )));
            }
            if layers.insert(e.layer, entry).is_some() {
                return Err(Error::Format(format!("duplicate layer {} in stats file", e.layer)));
            }
        }
        Ok(Self {
            layers,
            n_samples: file.n,
            seed: file.seed,
            granularity: file.granularity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct StatsFile {
    seed: Option<u64>,
    n: usize,
    #[serde(default)]
    granularity: Granularity,
    layers: Vec<StatsEntry>,
}

#[derive(Serialize, Deserialize)]
struct StatsEntry {
    layer: usize,
    min: Option<f32>,
    max: Option<f32>,
    count: u64,
    scale: f32,
    weight: WeightQuant,
}

/// Observes the input activation of every weight layer over `samples`
/// (FP32 execution) and derives min-max scales; weight params come from a
/// one-shot observation of each layer's folded weights.
pub fn run_calibration(graph: &ModelGraph, samples: &[ModelInput], granularity: Granularity) -> Result<CalibrationStats> {
    run_calibration_refs(graph, &samples.iter().collect::<Vec<_>>(), granularity)
}

pub fn run_calibration_refs(
    graph: &ModelGraph,
    samples: &[&ModelInput],
    granularity: Granularity,
) -> Result<CalibrationStats> {
    if samples.is_empty() {
        return Err(Error::invalid("calibration needs at least one sample"));
    }
    if graph.has_unfolded_bn() {
        return Err(Error::invalid("fold batch norm before calibrating"));
    }
    let mut observers: BTreeMap<usize, MinMaxObserver> = graph.layers().map(|l| (l.index, MinMaxObserver::new())).collect();
    for (s, sample) in samples.iter().enumerate() {
        execute(
            graph,
            sample,
            Exec::Fp32,
            &mut |layer, input| {
                observers
                    .get_mut(&layer.index)
                    .expect("observer per layer")
                    .observe(input)
                    .map_err(|_| Error::NonFinite(format!("input of layer {} ({}) on sample {s}", layer.index, layer.name)))
            },
            None,
        )?;
    }
    let mut layers = BTreeMap::new();
    for l in graph.layers() {
        let weight = WeightQuant::from_weights(&l.weight, granularity)?;
        let obs = observers.remove(&l.index).expect("observer per layer");
        layers.insert(l.index, LayerCalibration::new(obs, weight)?);
    }
    Ok(CalibrationStats {
        layers,
        n_samples: samples.len(),
        seed: None,
        granularity,
    })
}

/// Calibrates on the subset `set` of `dataset`, recording its seed.
pub fn calibrate_on(
    graph: &ModelGraph,
    dataset: &[ModelInput],
    set: &CalibSet,
    granularity: Granularity,
) -> Result<CalibrationStats> {
    Ok(run_calibration_refs(graph, &set.resolve(dataset), granularity)?.with_seed(set.seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibSweepRow {
    pub n: usize,
    pub seed: u64,
    /// `(layer index, max |x| observed at its input)` for every weight layer.
    pub layer_max: Vec<(usize, f32)>,
    pub score: f64,
}

/// For each `(n, seed)`: draw a calibration set from `pool`, calibrate
/// `graph` (plan already applied) and score it.
pub fn calib_size_sweep(
    graph: &ModelGraph,
    pool: &[ModelInput],
    sizes: &[usize],
    seeds: &[u64],
    sampling: Sampling,
    granularity: Granularity,
    evaluator: &dyn Evaluator,
) -> Result<Vec<CalibSweepRow>> {
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("calibration sizes must be sorted ascending"));
    }
    let mut rows = Vec::with_capacity(sizes.len() * seeds.len());
    for &n in sizes {
        for &seed in seeds {
            let set = select_calib_set(pool.len(), n, seed, sampling)?;
            let stats = calibrate_on(graph, pool, &set, granularity)?;
            let score = evaluator.evaluate(graph, Some(&stats))?;
            rows.push(CalibSweepRow {
                n,
                seed,
                layer_max: stats.layers().map(|(i, l)| (i, l.activation.max_abs())).collect(),
                score,
            });
        }
    }
    Ok(rows)
}

/// CSV with header `n,seed,layer,max_observed,score`.
pub fn sweep_rows_to_csv(rows: &[CalibSweepRow]) -> String {
    let mut out = String::from("n,seed,layer,max_observed,score\n");
    for r in rows {
        for (layer, max) in &r.layer_max {
            out.push_str(&format!("{},{},{},{},{}\n", r.n, r.seed, layer, max, r.score));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub n: usize,
    pub mean_score: f64,
    pub std_score: f64,
    pub mean_max: f64,
    pub std_max: f64,
}

/// Per-`n` mean and population std of the score and of `probe_layer`'s max.
pub fn summarize_sweep(rows: &[CalibSweepRow], probe_layer: usize) -> Vec<SizeSummary> {
    let mut by_n: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in rows {
        let e = by_n.entry(r.n).or_default();
        e.0.push(r.score);
        let m = r.layer_max.iter().find(|(i, _)| *i == probe_layer).map_or(0.0, |(_, m)| *m as f64);
        e.1.push(m);
    }
    by_n.into_iter()
        .map(|(n, (scores, maxes))| {
            let (mean_score, std_score) = mean_std(&scores);
            let (mean_max, std_max) = mean_std(&maxes);
            SizeSummary {
                n,
                mean_score,
                std_score,
                mean_max,
                std_max,
            }
        })
        .collect()
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    (mean, var.sqrt())
}

/// Re-derives a layer's activation scale straight from its observer range.
pub fn scale_from_range(range: Option<(f32, f32)>) -> Result<QuantParams> {
    let (lo, hi) = range.unwrap_or((0.0, 0.0));
    compute_scale(lo, hi)
}
