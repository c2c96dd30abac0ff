//! Gradient-based training through fake-quantized layers.
//!
//! INT8 layers use the clipped straight-through estimator: rounding is the
//! identity for the gradient inside `[−128·s, 127·s]` and the gradient is
//! zero outside. FP16 rounding is the identity for the gradient. Scales stay
//! frozen at the values in the supplied [`CalibrationStats`].

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationStats;
use crate::error::{Error, Result};
use crate::evaluator::Evaluator;
use crate::graph::{
    apply_plan, execute, pillar_max_backward, split_channels, Exec, LayerOp, LayerRole, ModelGraph, ModelInput, Node,
    NodeTrace, PrecisionPlan,
};
use crate::quant::QuantParams;
use crate::tensor::{
    conv2d_backward, linear_backward, relu_backward, scatter_pillars_backward, upsample2x_backward, Tensor,
};

/// Per-sample loss on the graph output.
pub trait Objective {
    fn num_samples(&self) -> usize;

    /// `(loss, ∂loss/∂output)` for sample `index`.
    fn loss_and_grad(&self, index: usize, output: &Tensor) -> Result<(f64, Tensor)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub cls_weight: f32,
    pub reg_weight: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            epochs: 1,
            batch_size: 8,
            seed: 0,
            optimizer: Optimizer::adam(),
            cls_weight: 1.0,
            reg_weight: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Weight and bias gradients for every layer, in index order.
#[derive(Debug, Clone, PartialEq)]
pub struct GradState {
    pub weight: Vec<Tensor>,
    pub bias: Vec<Tensor>,
}

impl GradState {
    pub fn zeros_like(graph: &ModelGraph) -> Self {
        Self {
            weight: graph.layers().map(|l| Tensor::zeros(l.weight.shape())).collect(),
            bias: graph.layers().map(|l| Tensor::zeros(l.bias.shape())).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &GradState) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight).chain(self.bias.iter_mut().zip(&other.bias)) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f32) {
        for t in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(Tensor::is_finite)
    }
}

/// Clipped STE: `upstream` where `x` lies inside the clip range, else 0.
pub fn ste_fake_quant_backward(x: &Tensor, qp: QuantParams, upstream: &Tensor) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape(
            "ste_fake_quant_backward",
            format!("{:?} vs upstream {:?}", x.shape(), upstream.shape()),
        ));
    }
    let (lo, hi) = qp.clip_range();
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &g)| if v >= lo && v <= hi { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn apply_mask(t: &mut Tensor, mask: &Option<Vec<bool>>) {
    if let Some(mask) = mask {
        for (v, &keep) in t.data_mut().iter_mut().zip(mask) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}

/// Forward with a trace, then back-propagates the objective's output
/// gradient. `stats = None` runs every layer in FP32 regardless of tags.
pub fn backward(
    graph: &ModelGraph,
    input: &ModelInput,
    stats: Option<&CalibrationStats>,
    loss: impl FnOnce(&Tensor) -> Result<(f64, Tensor)>,
) -> Result<(f64, GradState)> {
    if graph.has_unfolded_bn() {
        return Err(Error::invalid("fold batch norm before training"));
    }
    let exec = match stats {
        Some(s) => Exec::Tagged(Some(s)),
        None => Exec::Fp32,
    };
    let mut trace = Vec::with_capacity(graph.nodes().len());
    let output = execute(graph, input, exec, &mut |_, _| Ok(()), Some(&mut trace))?;
    let (value, grad_out) = loss(&output)?;
    if grad_out.shape() != output.shape() {
        return Err(Error::shape(
            "backward",
            format!("loss gradient {:?} vs output {:?}", grad_out.shape(), output.shape()),
        ));
    }
    let mut grads = GradState::zeros_like(graph);
    let nodes = graph.nodes();
    let head_channels: Vec<usize> = graph
        .layers()
        .filter(|l| l.role == LayerRole::Head)
        .map(|l| l.out_channels())
        .collect();
    let mut head_grads = if head_channels.is_empty() {
        Vec::new()
    } else {
        split_channels(&grad_out, &head_channels)?
    };
    let mut trunk_grad: Option<Tensor> = if head_channels.is_empty() { Some(grad_out) } else { None };
    for (node, record) in nodes.iter().zip(&trace).rev() {
        match (node, record) {
            (
                Node::Layer(layer),
                NodeTrace::Layer {
                    input,
                    weight,
                    input_mask,
                    weight_mask,
                    output,
                },
            ) => {
                let upstream = if layer.role == LayerRole::Head {
                    head_grads.pop().expect("one gradient per head")
                } else {
                    trunk_grad.take().expect("gradient flows down the trunk")
                };
                let upstream = if layer.relu { relu_backward(output, &upstream) } else { upstream };
                let (mut dx, mut dw, db) = match layer.op {
                    LayerOp::Linear => linear_backward(input, weight, &upstream)?,
                    LayerOp::Conv2d { params } => conv2d_backward(input, weight, params, &upstream)?,
                };
                apply_mask(&mut dw, weight_mask);
                apply_mask(&mut dx, input_mask);
                grads.weight[layer.index - 1] = dw;
                grads.bias[layer.index - 1] = db;
                match (&mut trunk_grad, layer.role) {
                    (Some(acc), LayerRole::Head) => acc.add_assign(&dx),
                    (slot, _) => *slot = Some(dx),
                }
            }
            (Node::PillarMax, NodeTrace::PillarMax { argmax, rows }) => {
                let g = trunk_grad.take().expect("gradient reaches pillar max");
                trunk_grad = Some(pillar_max_backward(&g, argmax, *rows)?);
            }
            (Node::Scatter { .. }, NodeTrace::Scatter) => {
                let batch = match input {
                    ModelInput::Pillars(b) => b,
                    ModelInput::Dense(_) => return Err(Error::invalid("scatter needs a pillarized input")),
                };
                let g = trunk_grad.take().expect("gradient reaches scatter");
                trunk_grad = Some(scatter_pillars_backward(&g, &batch.coords)?);
            }
            (Node::Upsample2x, NodeTrace::Upsample) => {
                let g = trunk_grad.take().expect("gradient reaches upsample");
                trunk_grad = Some(upsample2x_backward(&g)?);
            }
            _ => unreachable!("trace records follow the node list"),
        }
    }
    Ok((value, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub loss: f64,
    pub score: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub graph: ModelGraph,
    pub history: Vec<EpochRecord>,
}

/// Fine-tunes `graph` under `plan` with scales frozen at `stats`.
pub fn train_qat(
    graph: &ModelGraph,
    plan: &PrecisionPlan,
    stats: &CalibrationStats,
    inputs: &[ModelInput],
    objective: &dyn Objective,
    cfg: &TrainConfig,
    evaluator: Option<&dyn Evaluator>,
) -> Result<TrainOutcome> {
    let g = apply_plan(graph, plan)?;
    train_loop(g, Some(stats), inputs, objective, cfg, evaluator)
}

/// Ordinary full-precision training; precision tags are ignored.
pub fn train_fp32(
    graph: &ModelGraph,
    inputs: &[ModelInput],
    objective: &dyn Objective,
    cfg: &TrainConfig,
    evaluator: Option<&dyn Evaluator>,
) -> Result<TrainOutcome> {
    train_loop(graph.clone(), None, inputs, objective, cfg, evaluator)
}

struct OptimState {
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

fn train_loop(
    mut graph: ModelGraph,
    stats: Option<&CalibrationStats>,
    inputs: &[ModelInput],
    objective: &dyn Objective,
    cfg: &TrainConfig,
    evaluator: Option<&dyn Evaluator>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if inputs.is_empty() || inputs.len() != objective.num_samples() {
        return Err(Error::invalid(format!(
            "{} training inputs for an objective over {} samples",
            inputs.len(),
            objective.num_samples()
        )));
    }
    let zeros = GradState::zeros_like(&graph);
    let params = zeros.weight.len() + zeros.bias.len();
    let mut state = OptimState {
        step: 0,
        m: zeros.weight.iter().chain(&zeros.bias).cloned().collect(),
        v: zeros.weight.iter().chain(&zeros.bias).cloned().collect(),
    };
    debug_assert_eq!(state.m.len(), params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut losses = vec![0.0f64; inputs.len()];
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc = GradState::zeros_like(&graph);
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let (loss, grads) = backward(&graph, &inputs[i], stats, |out| objective.loss_and_grad(i, out))?;
                losses[i] = loss;
                batch_loss += loss;
                acc.accumulate(&grads);
            }
            acc.scale(1.0 / batch.len() as f32);
            let mean = batch_loss / batch.len() as f64;
            if !mean.is_finite() || !acc.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_no,
                    loss: mean as f32,
                });
            }
            step(&mut graph, &acc, &mut state, cfg);
        }
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let score = evaluator.map(|e| e.evaluate(&graph, stats)).transpose()?;
        history.push(EpochRecord { epoch, loss, score });
    }
    Ok(TrainOutcome { graph, history })
}

fn step(graph: &mut ModelGraph, grads: &GradState, state: &mut OptimState, cfg: &TrainConfig) {
    let lr = cfg.learning_rate;
    if lr == 0.0 {
        return;
    }
    state.step += 1;
    let n = grads.weight.len();
    for (li, layer) in graph.layers_mut().enumerate() {
        for (slot, param, grad) in [(li, &mut layer.weight, &grads.weight[li]), (n + li, &mut layer.bias, &grads.bias[li])] {
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *p -= lr * g;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(state.step);
                    let bc2 = 1.0 - beta2.powi(state.step);
                    let m = state.m[slot].data_mut();
                    let v = state.v[slot].data_mut();
                    for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Training history CSV with header `epoch,loss,score`.
pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,score\n");
    for r in history {
        let score = r.score.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", r.epoch, r.loss, score);
    }
    out
}
