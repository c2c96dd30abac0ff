//! The toy pillar detector: per-point linear encoder with max-over-points,
//! scatter to a pseudo-image, two strided conv stages, an upsampling neck
//! and 1×1 classification and regression heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{execute, BatchNorm, Exec, LayerOp, LayerRole, LayerSpec, ModelGraph, ModelInput, Node};
use crate::harness::pillar::{PillarConfig, POINT_FEATURES};
use crate::harness::scene::NUM_CLASSES;
use crate::quant::DtypeTag;
use crate::tensor::{ConvParams, Tensor};

/// Regression channels: `dx, dy, ln(w / cell), ln(h / cell)`.
pub const REG_CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub pillar: PillarConfig,
    pub pfn_width: usize,
    /// Channels of the first (stride 2) and second (stride 4) stage.
    pub stage_widths: [usize; 2],
    /// Convs per stage, including the strided one.
    pub stage_depth: [usize; 2],
    pub neck_width: usize,
    pub neck_depth: usize,
    /// Initial foreground probability of the classification head.
    pub cls_prior: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            pillar: PillarConfig::default(),
            pfn_width: 16,
            stage_widths: [24, 32],
            stage_depth: [3, 3],
            neck_width: 24,
            neck_depth: 3,
            cls_prior: 0.01,
        }
    }
}

impl DetectorConfig {
    /// `[rows, cols]` of the head maps (half the pillar grid).
    pub fn output_grid(&self) -> [usize; 2] {
        [self.pillar.grid[0] / 2, self.pillar.grid[1] / 2]
    }

    /// Field units per output cell along `[y, x]`.
    pub fn output_cell(&self) -> [f32; 2] {
        let [ry, rx] = self.output_grid();
        [self.pillar.field / ry as f32, self.pillar.field / rx as f32]
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.pillar.grid;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("pillar grid {h}×{w} must be a positive multiple of 4")));
        }
        if self.stage_depth.contains(&0) || self.pfn_width == 0 || self.neck_width == 0 || self.neck_depth == 0 {
            return Err(Error::invalid("detector widths and depths must be positive"));
        }
        if self.pillar.max_points == 0 {
            return Err(Error::invalid("max_points must be positive"));
        }
        Ok(())
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    /// He-normal weights.
    fn weight(&mut self, shape: &[usize]) -> Tensor {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
        Tensor::from_fn(shape, |_| normal.sample(&mut self.rng))
    }

    fn bn(&mut self, channels: usize) -> BatchNorm {
        let gamma = Uniform::new(0.9f32, 1.1).expect("valid range");
        let beta = Uniform::new(-0.05f32, 0.05).expect("valid range");
        BatchNorm {
            gamma: (0..channels).map(|_| gamma.sample(&mut self.rng)).collect(),
            beta: (0..channels).map(|_| beta.sample(&mut self.rng)).collect(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 1e-3,
        }
    }
}

/// Builds the detector with unfolded BN. Layer indices run from the
/// encoder linear (1) to the regression head (last).
pub fn build_toy_detector(cfg: &DetectorConfig, seed: u64) -> Result<ModelGraph> {
    cfg.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut nodes = Vec::new();
    let mut index = 0;
    let mut next = |nodes: &mut Vec<Node>, name: String, op: LayerOp, weight: Tensor, bn: Option<BatchNorm>, relu: bool, role| {
        index += 1;
        let out = weight.shape()[0];
        nodes.push(Node::Layer(LayerSpec {
            index,
            name,
            op,
            weight,
            bias: Tensor::zeros(&[out]),
            bn,
            relu,
            role,
            precision: DtypeTag::Fp32,
        }));
    };
    let conv = |stride| LayerOp::Conv2d {
        params: ConvParams::new(stride, 1),
    };

    let w = init.weight(&[cfg.pfn_width, POINT_FEATURES]);
    let bn = init.bn(cfg.pfn_width);
    next(&mut nodes, "voxel_encoder.pfn_layers.0.linear".into(), LayerOp::Linear, w, Some(bn), true, LayerRole::Trunk);
    nodes.push(Node::PillarMax);
    nodes.push(Node::Scatter { grid: cfg.pillar.grid });

    let mut channels = cfg.pfn_width;
    for (stage, (&width, &depth)) in cfg.stage_widths.iter().zip(&cfg.stage_depth).enumerate() {
        for j in 0..depth {
            let w = init.weight(&[width, channels, 3, 3]);
            let bn = init.bn(width);
            let stride = if j == 0 { 2 } else { 1 };
            next(&mut nodes, format!("backbone.blocks.{stage}.{}", 3 * j), conv(stride), w, Some(bn), true, LayerRole::Trunk);
            channels = width;
        }
    }
    nodes.push(Node::Upsample2x);
    for j in 0..cfg.neck_depth {
        let w = init.weight(&[cfg.neck_width, channels, 3, 3]);
        let bn = init.bn(cfg.neck_width);
        next(&mut nodes, format!("neck.deblocks.{j}.0"), conv(1), w, Some(bn), true, LayerRole::Trunk);
        channels = cfg.neck_width;
    }

    let mut head = |shape: &[usize], std: f32| {
        let normal = Normal::new(0.0f32, std).expect("positive std");
        Tensor::from_fn(shape, |_| normal.sample(&mut init.rng))
    };
    let one = LayerOp::Conv2d {
        params: ConvParams::new(1, 0),
    };
    let cls_w = head(&[NUM_CLASSES, channels, 1, 1], 0.01);
    let reg_w = head(&[REG_CHANNELS, channels, 1, 1], 0.01);
    next(&mut nodes, "bbox_head.conv_cls".into(), one, cls_w, None, false, LayerRole::Head);
    next(&mut nodes, "bbox_head.conv_reg".into(), one, reg_w, None, false, LayerRole::Head);

    let mut graph = ModelGraph::new(nodes, vec!["voxel_encoder".into(), "backbone".into(), "neck".into(), "bbox_head".into()])?;
    let prior_bias = -((1.0 - cfg.cls_prior) / cfg.cls_prior).ln();
    for l in graph.layers_mut() {
        if l.name == "bbox_head.conv_cls" {
            l.bias = Tensor::full(&[NUM_CLASSES], prior_bias);
        }
    }
    Ok(graph)
}

/// Data-dependent BN initialization: in index order, sets each BN layer's
/// running mean and variance to the per-channel statistics of its
/// pre-normalization output over `inputs` (padded pillar rows excluded), so
/// every layer starts with roughly unit-scale activations.
pub fn init_bn_from_data(graph: &ModelGraph, inputs: &[ModelInput]) -> Result<ModelGraph> {
    if inputs.is_empty() {
        return Err(Error::invalid("BN initialization needs at least one input"));
    }
    let mut g = graph.clone();
    let targets: Vec<usize> = g.layers().filter(|l| l.bn.is_some()).map(|l| l.index).collect();
    for index in targets {
        let mut raw_layer = g.layer(index)?.clone();
        raw_layer.bn = None;
        raw_layer.relu = false;
        let c = raw_layer.out_channels();
        let (mut sum, mut sq, mut count) = (vec![0.0f64; c], vec![0.0f64; c], 0usize);
        for x in inputs {
            let mut captured = None;
            execute(
                &g,
                x,
                Exec::Fp32,
                &mut |l, src| {
                    if l.index == index {
                        captured = Some(src.clone());
                    }
                    Ok(())
                },
                None,
            )?;
            let src = captured.ok_or(Error::UnknownLayer(index))?;
            let out = raw_layer.apply_kernel(&src, &raw_layer.weight)?;
            let d = out.data();
            match (raw_layer.op, x) {
                (LayerOp::Linear, ModelInput::Pillars(b)) if out.shape()[0] == b.counts.len() * b.max_points => {
                    for (p, &n) in b.counts.iter().enumerate() {
                        for row in p * b.max_points..p * b.max_points + n {
                            for ch in 0..c {
                                let v = d[row * c + ch] as f64;
                                sum[ch] += v;
                                sq[ch] += v * v;
                            }
                            count += 1;
                        }
                    }
                }
                _ => {
                    let inner = out.len() / (out.shape()[0] * c);
                    for (i, &v) in d.iter().enumerate() {
                        let ch = (i / inner) % c;
                        sum[ch] += v as f64;
                        sq[ch] += (v as f64) * (v as f64);
                    }
                    count += out.len() / c;
                }
            }
        }
        let n = count.max(1) as f64;
        let layer = g.layers_mut().find(|l| l.index == index).expect("index from this graph");
        let bn = layer.bn.as_mut().expect("selected for BN");
        for ch in 0..c {
            let mean = sum[ch] / n;
            bn.mean[ch] = mean as f32;
            bn.var[ch] = (sq[ch] / n - mean * mean).max(1e-6) as f32;
        }
    }
    Ok(g)
}

/// Splits the concatenated head output `[1, classes + 4, H, W]` into the
/// classification logits and the regression map.
pub fn split_head_output(output: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = output.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != NUM_CLASSES + REG_CHANNELS {
        return Err(Error::shape(
            "split_head_output",
            format!("expected [1, {}, H, W], got {s:?}", NUM_CLASSES + REG_CHANNELS),
        ));
    }
    let plane = s[2] * s[3];
    let d = output.data();
    Ok((
        Tensor::new(vec![1, NUM_CLASSES, s[2], s[3]], d[..NUM_CLASSES * plane].to_vec())?,
        Tensor::new(vec![1, REG_CHANNELS, s[2], s[3]], d[NUM_CLASSES * plane..].to_vec())?,
    ))
}
