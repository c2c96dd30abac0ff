//! Chain-structured model graphs with per-layer precision tags.
//!
//! A graph is an ordered list of nodes. Weight layers carry 1-based indices
//! that form the sensitivity index space; glue nodes (pillar max-pool,
//! scatter, upsample) carry no precision. Trailing `Head` layers all consume
//! the last trunk output and their outputs are concatenated along axis 1.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::CalibrationStats;
use crate::error::{Error, Result};
use crate::quant::{fake_quant, fp16_roundtrip, DtypeTag};
use crate::tensor::{conv2d, linear, relu, scatter_pillars, upsample2x, ConvParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum LayerOp {
    Linear,
    Conv2d { params: ConvParams },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    #[default]
    Trunk,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize, eps: f32) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Applies inference-mode BN along axis 1 of `[N, C]` or `[N, C, H, W]`.
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let shape = t.shape();
        if shape.len() < 2 || shape[1] != self.channels() {
            return Err(Error::shape("batch_norm", format!("{shape:?} vs {} channels", self.channels())));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = (*v - self.mean[ch]) / (self.var[ch] + self.eps).sqrt() * self.gamma[ch] + self.beta[ch];
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub name: String,
    pub op: LayerOp,
    pub weight: Tensor,
    pub bias: Tensor,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
    pub role: LayerRole,
    pub precision: DtypeTag,
}

impl LayerSpec {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// FP32 kernel plus BN (if unfolded) and the fused ReLU.
    pub fn apply_kernel(&self, input: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let mut out = match self.op {
            LayerOp::Linear => linear(input, weight, &self.bias)?,
            LayerOp::Conv2d { params } => conv2d(input, weight, &self.bias, params)?,
        };
        if let Some(bn) = &self.bn {
            out = bn.apply(&out)?;
        }
        if self.relu {
            out = relu(&out);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Layer(LayerSpec),
    /// Max over the valid points of each pillar: `[P*M, C] -> [P, C]`.
    PillarMax,
    Scatter { grid: [usize; 2] },
    Upsample2x,
}

/// Pillarized point cloud ready for the voxel encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarBatch {
    /// `[P * max_points, C]`, padded rows are zero.
    pub points: Tensor,
    pub counts: Vec<usize>,
    pub coords: Vec<(usize, usize)>,
    pub max_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelInput {
    Dense(Tensor),
    Pillars(PillarBatch),
}

impl ModelInput {
    fn initial(&self) -> &Tensor {
        match self {
            ModelInput::Dense(t) => t,
            ModelInput::Pillars(b) => &b.points,
        }
    }

    fn pillars(&self, op: &'static str) -> Result<&PillarBatch> {
        match self {
            ModelInput::Pillars(b) => Ok(b),
            ModelInput::Dense(_) => Err(Error::invalid(format!("{op} needs a pillarized input"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    nodes: Vec<Node>,
    groups: Vec<String>,
}

impl ModelGraph {
    pub fn new(nodes: Vec<Node>, groups: Vec<String>) -> Result<Self> {
        let mut expected = 1;
        let mut in_heads = false;
        for node in &nodes {
            match node {
                Node::Layer(l) => {
                    if l.index != expected {
                        return Err(Error::invalid(format!(
                            "layer `{}` has index {} but the next index must be {expected}",
                            l.name, l.index
                        )));
                    }
                    expected += 1;
                    check_layer_shapes(l)?;
                    match l.role {
                        LayerRole::Head => in_heads = true,
                        LayerRole::Trunk if in_heads => {
                            return Err(Error::invalid(format!("trunk layer `{}` follows a head layer", l.name)))
                        }
                        LayerRole::Trunk => {}
                    }
                }
                _ if in_heads => return Err(Error::invalid("glue node follows a head layer")),
                _ => {}
            }
        }
        Ok(Self { nodes, groups })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Layer(l) => Some(l),
            _ => None,
        })
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut LayerSpec> {
        self.nodes.iter_mut().filter_map(|n| match n {
            Node::Layer(l) => Some(l),
            _ => None,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers().count()
    }

    pub fn layer(&self, index: usize) -> Result<&LayerSpec> {
        self.layers().find(|l| l.index == index).ok_or(Error::UnknownLayer(index))
    }

    pub fn precisions(&self) -> Vec<DtypeTag> {
        self.layers().map(|l| l.precision).collect()
    }

    /// Number of dtype changes between consecutive weight layers.
    pub fn qdq_boundaries(&self) -> usize {
        count_boundaries(&self.precisions())
    }

    /// Folds every BN into its layer's weights and bias.
    pub fn fold_all_bn(&self) -> Result<ModelGraph> {
        let mut g = self.clone();
        for n in &mut g.nodes {
            if let Node::Layer(l) = n {
                if l.bn.is_some() {
                    *l = fold_bn(l)?;
                }
            }
        }
        Ok(g)
    }

    pub fn has_unfolded_bn(&self) -> bool {
        self.layers().any(|l| l.bn.is_some())
    }

    /// SHA-256 over every layer's weight and bias bytes, in index order.
    pub fn weight_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in self.layers() {
            for v in l.weight.data().iter().chain(l.bias.data()) {
                h.update(v.to_le_bytes());
            }
        }
        to_hex(&h.finalize())
    }
}

pub(crate) fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn count_boundaries(precisions: &[DtypeTag]) -> usize {
    precisions.windows(2).filter(|w| w[0] != w[1]).count()
}

fn check_layer_shapes(l: &LayerSpec) -> Result<()> {
    let rank = match l.op {
        LayerOp::Linear => 2,
        LayerOp::Conv2d { .. } => 4,
    };
    if l.weight.shape().len() != rank {
        return Err(Error::shape(
            "layer",
            format!("`{}` weight {:?} has the wrong rank for {:?}", l.name, l.weight.shape(), l.op),
        ));
    }
    if l.bias.shape() != [l.out_channels()] {
        return Err(Error::shape(
            "layer",
            format!("`{}` bias {:?} vs {} outputs", l.name, l.bias.shape(), l.out_channels()),
        ));
    }
    if let Some(bn) = &l.bn {
        let c = l.out_channels();
        if [bn.beta.len(), bn.mean.len(), bn.var.len(), bn.gamma.len()].iter().any(|&n| n != c) {
            return Err(Error::shape("layer", format!("`{}` batch norm does not have {c} channels", l.name)));
        }
    }
    Ok(())
}

/// Folds inference BN into the preceding weight layer:
/// `w' = w·γ/√(var+eps)` per output channel, `b' = (b − mean)·γ/√(var+eps) + β`.
pub fn fold_bn(layer: &LayerSpec) -> Result<LayerSpec> {
    let bn = layer
        .bn
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("layer `{}` has no batch norm to fold", layer.name)))?;
    let c = layer.out_channels();
    let per = layer.weight.len() / c;
    let mut weight = layer.weight.clone();
    let mut bias = layer.bias.clone();
    for ch in 0..c {
        let denom = bn.var[ch] + bn.eps;
        if !(denom > 0.0) {
            return Err(Error::invalid(format!(
                "layer `{}` channel {ch}: var + eps = {denom} is not positive",
                layer.name
            )));
        }
        let k = bn.gamma[ch] / denom.sqrt();
        for w in &mut weight.data_mut()[ch * per..(ch + 1) * per] {
            *w *= k;
        }
        let b = &mut bias.data_mut()[ch];
        *b = (*b - bn.mean[ch]) * k + bn.beta[ch];
    }
    Ok(LayerSpec {
        weight,
        bias,
        bn: None,
        ..layer.clone()
    })
}

/// Layer-index → dtype assignment with a default for unlisted layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrecisionPlan {
    pub default: DtypeTag,
    #[serde(default)]
    pub overrides: BTreeMap<usize, DtypeTag>,
}

impl PrecisionPlan {
    pub fn uniform(dtype: DtypeTag) -> Self {
        Self {
            default: dtype,
            overrides: BTreeMap::new(),
        }
    }

    /// INT8 everywhere except the listed FP16 layers.
    pub fn int8_with_fp16(fp16: &[usize]) -> Self {
        Self {
            default: DtypeTag::Int8,
            overrides: fp16.iter().map(|&i| (i, DtypeTag::Fp16)).collect(),
        }
    }

    pub fn with(mut self, index: usize, dtype: DtypeTag) -> Self {
        self.overrides.insert(index, dtype);
        self
    }

    pub fn dtype_for(&self, index: usize) -> DtypeTag {
        self.overrides.get(&index).copied().unwrap_or(self.default)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        match self.overrides.keys().find(|&&i| i == 0 || i > num_layers) {
            Some(&i) => Err(Error::UnknownLayer(i)),
            None => Ok(()),
        }
    }

    pub fn dtypes(&self, num_layers: usize) -> Vec<DtypeTag> {
        (1..=num_layers).map(|i| self.dtype_for(i)).collect()
    }
}

impl fmt::Display for PrecisionPlan {
    /// `FP16: 1,22` style label for INT8-default plans, otherwise the default
    /// dtype followed by any overrides.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.overrides.is_empty() {
            return write!(f, "{}", self.default);
        }
        let mut by_dtype: BTreeMap<DtypeTag, Vec<String>> = BTreeMap::new();
        for (i, d) in &self.overrides {
            if *d != self.default {
                by_dtype.entry(*d).or_default().push(i.to_string());
            }
        }
        let parts: Vec<String> = by_dtype.iter().map(|(d, v)| format!("{d}: {}", v.join(","))).collect();
        if self.default == DtypeTag::Int8 {
            write!(f, "{}", parts.join("; "))
        } else {
            write!(f, "{} + {}", self.default, parts.join("; "))
        }
    }
}

impl std::str::FromStr for PrecisionPlan {
    type Err = Error;

    /// Inverse of `Display`: `INT8`, `FP16: 1,22` or `FP32 + INT8: 3; FP16: 4`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (default, rest) = match s.split_once('+') {
            Some((d, rest)) => (d.trim().parse()?, rest.trim()),
            None if s.contains(':') => (DtypeTag::Int8, s),
            None => return Ok(Self::uniform(s.parse()?)),
        };
        let mut plan = Self::uniform(default);
        for part in rest.split(';') {
            let (dtype, list) = part
                .split_once(':')
                .ok_or_else(|| Error::invalid(format!("plan segment `{part}` lacks `DTYPE:`")))?;
            let dtype: DtypeTag = dtype.trim().parse()?;
            for idx in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                let i = idx
                    .parse()
                    .map_err(|_| Error::invalid(format!("layer index `{idx}` in plan `{s}`")))?;
                plan.overrides.insert(i, dtype);
            }
        }
        Ok(plan)
    }
}

pub fn apply_plan(graph: &ModelGraph, plan: &PrecisionPlan) -> Result<ModelGraph> {
    plan.validate(graph.num_layers())?;
    let mut g = graph.clone();
    for l in g.layers_mut() {
        l.precision = plan.dtype_for(l.index);
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub output: Tensor,
    pub qdq_boundaries: usize,
}

/// How precision tags are honoured during execution.
#[derive(Clone, Copy)]
pub(crate) enum Exec<'a> {
    /// Ignore tags; every layer runs in FP32 (calibration passes).
    Fp32,
    Tagged(Option<&'a CalibrationStats>),
}

/// Per-node record kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) enum NodeTrace {
    Layer {
        /// Input as consumed by the kernel (after fake-quant / FP16 rounding).
        input: Tensor,
        weight: Tensor,
        input_mask: Option<Vec<bool>>,
        weight_mask: Option<Vec<bool>>,
        output: Tensor,
    },
    PillarMax { argmax: Vec<usize>, rows: usize },
    Scatter,
    Upsample,
}

/// Runs `graph` on `input`. Every INT8 layer fake-quantizes its input
/// activation and weight, every FP16 layer rounds both through binary16;
/// FP32 layers run the plain kernel.
pub fn forward(graph: &ModelGraph, input: &ModelInput, stats: Option<&CalibrationStats>) -> Result<ForwardOutput> {
    let output = execute(graph, input, Exec::Tagged(stats), &mut |_, _| Ok(()), None)?;
    Ok(ForwardOutput {
        output,
        qdq_boundaries: graph.qdq_boundaries(),
    })
}

pub(crate) fn execute(
    graph: &ModelGraph,
    input: &ModelInput,
    exec: Exec<'_>,
    hook: &mut dyn FnMut(&LayerSpec, &Tensor) -> Result<()>,
    mut trace: Option<&mut Vec<NodeTrace>>,
) -> Result<Tensor> {
    let mut current = input.initial().clone();
    let mut trunk: Option<Tensor> = None;
    let mut heads: Vec<Tensor> = Vec::new();
    for node in graph.nodes() {
        match node {
            Node::Layer(layer) => {
                let src = if layer.role == LayerRole::Head {
                    trunk.get_or_insert_with(|| current.clone())
                } else {
                    &current
                };
                hook(layer, src)?;
                let (x, w, input_mask, weight_mask) = prepare_operands(layer, src, exec, trace.is_some())?;
                let out = layer.apply_kernel(&x, &w)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(NodeTrace::Layer {
                        input: x,
                        weight: w,
                        input_mask,
                        weight_mask,
                        output: out.clone(),
                    });
                }
                if layer.role == LayerRole::Head {
                    heads.push(out);
                } else {
                    current = out;
                }
            }
            Node::PillarMax => {
                let batch = input.pillars("pillar max-pool")?;
                let (pooled, argmax) = pillar_max(&current, batch)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(NodeTrace::PillarMax {
                        argmax,
                        rows: current.shape()[0],
                    });
                }
                current = pooled;
            }
            Node::Scatter { grid } => {
                let batch = input.pillars("scatter")?;
                current = scatter_pillars(&current, &batch.coords, (grid[0], grid[1]))?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(NodeTrace::Scatter);
                }
            }
            Node::Upsample2x => {
                current = upsample2x(&current)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(NodeTrace::Upsample);
                }
            }
        }
    }
    if heads.is_empty() {
        Ok(current)
    } else {
        concat_channels(&heads)
    }
}

#[allow(clippy::type_complexity)]
fn prepare_operands(
    layer: &LayerSpec,
    input: &Tensor,
    exec: Exec<'_>,
    want_masks: bool,
) -> Result<(Tensor, Tensor, Option<Vec<bool>>, Option<Vec<bool>>)> {
    let dtype = match exec {
        Exec::Fp32 => DtypeTag::Fp32,
        Exec::Tagged(_) => layer.precision,
    };
    match dtype {
        DtypeTag::Fp32 => Ok((input.clone(), layer.weight.clone(), None, None)),
        DtypeTag::Fp16 => Ok((fp16_roundtrip(input), fp16_roundtrip(&layer.weight), None, None)),
        DtypeTag::Int8 => {
            let entry = match exec {
                Exec::Tagged(Some(stats)) => stats.layer(layer.index),
                _ => None,
            }
            .ok_or_else(|| Error::MissingQuantParams {
                index: layer.index,
                name: layer.name.clone(),
            })?;
            let act = entry.activation_params();
            let x = fake_quant(input, act);
            let w = entry.weight.fake_quant(&layer.weight);
            let (im, wm) = if want_masks {
                let (lo, hi) = act.clip_range();
                let im = input.data().iter().map(|&v| v >= lo && v <= hi).collect();
                (Some(im), Some(entry.weight.in_range_mask(&layer.weight)))
            } else {
                (None, None)
            };
            Ok((x, w, im, wm))
        }
    }
}

fn pillar_max(points: &Tensor, batch: &PillarBatch) -> Result<(Tensor, Vec<usize>)> {
    let [rows, c] = points.dims2("pillar_max")?;
    let p = batch.counts.len();
    let m = batch.max_points;
    if rows != p * m {
        return Err(Error::shape(
            "pillar_max",
            format!("{rows} point rows for {p} pillars of {m} points"),
        ));
    }
    let x = points.data();
    let mut out = vec![0.0f32; p * c];
    let mut argmax = vec![usize::MAX; p * c];
    for (pi, &count) in batch.counts.iter().enumerate() {
        for j in 0..count.min(m) {
            let row = pi * m + j;
            for ch in 0..c {
                let v = x[row * c + ch];
                let slot = pi * c + ch;
                if argmax[slot] == usize::MAX || v > out[slot] {
                    out[slot] = v;
                    argmax[slot] = row;
                }
            }
        }
    }
    Ok((Tensor::new(vec![p, c], out)?, argmax))
}

pub(crate) fn pillar_max_backward(upstream: &Tensor, argmax: &[usize], rows: usize) -> Result<Tensor> {
    let [_, c] = upstream.dims2("pillar_max_backward")?;
    let mut dx = vec![0.0f32; rows * c];
    for (slot, &row) in argmax.iter().enumerate() {
        if row != usize::MAX {
            dx[row * c + slot % c] += upstream.data()[slot];
        }
    }
    Tensor::new(vec![rows, c], dx)
}

fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts[0].shape();
    let n = first[0];
    let inner: usize = first[2..].iter().product();
    let mut channels = 0;
    for p in parts {
        if p.shape()[0] != n || p.shape()[2..] != first[2..] {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", p.shape(), first)));
        }
        channels += p.shape()[1];
    }
    let mut data = Vec::with_capacity(n * channels * inner);
    for b in 0..n {
        for p in parts {
            let block = p.shape()[1] * inner;
            data.extend_from_slice(&p.data()[b * block..(b + 1) * block]);
        }
    }
    let mut shape = first.to_vec();
    shape[1] = channels;
    Tensor::new(shape, data)
}

/// Splits a concatenated head gradient back into per-head pieces.
pub(crate) fn split_channels(t: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let shape = t.shape();
    let n = shape[0];
    let inner: usize = shape[2..].iter().product();
    let total: usize = channels.iter().sum();
    if shape[1] != total {
        return Err(Error::shape("split", format!("{shape:?} vs channels {channels:?}")));
    }
    let mut out = Vec::with_capacity(channels.len());
    let mut offset = 0;
    for &c in channels {
        let mut data = Vec::with_capacity(n * c * inner);
        for b in 0..n {
            let start = (b * total + offset) * inner;
            data.extend_from_slice(&t.data()[start..start + c * inner]);
        }
        let mut s = shape.to_vec();
        s[1] = c;
        out.push(Tensor::new(s, data)?);
        offset += c;
    }
    Ok(out)
}
