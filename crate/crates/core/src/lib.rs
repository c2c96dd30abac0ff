//! Mixed-precision quantization toolkit.
//!
//! Symmetric INT8 post-training quantization with min-max calibration,
//! one-layer-at-a-time sensitivity search, greedy FP16 assignment of the most
//! sensitive layers, optional quantization-aware fine-tuning and latency-based
//! plan ranking. A synthetic pillar-style detection task ([`harness`]) drives
//! everything end to end.

pub mod calibration;
pub mod error;
pub mod evaluator;
pub mod graph;
pub mod harness;
pub mod latency;
pub mod model_io;
pub mod qat;
pub mod quant;
pub mod sensitivity;
pub mod tensor;

pub use calibration::{run_calibration, select_calib_set, CalibSet, CalibrationStats, Sampling};
pub use error::{Error, Result};
pub use evaluator::Evaluator;
pub use graph::{apply_plan, fold_bn, forward, LayerSpec, ModelGraph, ModelInput, PrecisionPlan};
pub use latency::{builtin_table, estimate_plan, speedup, LatencyTable, PlanLatencyReport};
pub use model_io::{load_model, save_model};
pub use qat::{train_qat, Objective, TrainConfig};
pub use quant::{compute_scale, dequantize, fake_quant, fp16_roundtrip, quantize, DtypeTag, Granularity, MinMaxObserver, QuantParams};
pub use sensitivity::{exhaustive_search, finalize_ptq, greedy_candidates, select_topk, sweep, CandidatePlan};
pub use tensor::{ConvParams, Tensor};
