//! Synthetic pillar-detection task used to exercise the toolkit end to end.

pub mod dataset_io;
pub mod decode;
pub mod detector;
pub mod experiments;
pub mod metrics;
pub mod objective;
pub mod pillar;
pub mod scene;

pub use dataset_io::{load_dataset, save_dataset, DatasetManifest};
pub use decode::{decode_and_nms, iou, Detection};
pub use detector::{build_toy_detector, split_head_output, DetectorConfig};
pub use experiments::{
    calibration_curve, difficulty_correlations, evaluate_plan, pretrain, run_pipeline, summarize_curve,
    DetectionEvaluator, EvalParams, HarnessConfig, PipelineConfig, PipelineReport, Task,
};
pub use metrics::{ap40, evaluate_detections, pearson, EvalResult};
pub use objective::DetectionObjective;
pub use pillar::{pillarize, PillarConfig};
pub use scene::{generate_dataset, Difficulty, DatasetConfig, GtBox, Scene};
