use crate::calibration::CalibrationStats;
use crate::error::Result;
use crate::graph::ModelGraph;

/// Scores a graph whose precision tags are already applied. Higher is better.
///
/// Implementations must be deterministic: the sensitivity sweep and the
/// exhaustive oracle compare scores across plans and reruns.
pub trait Evaluator {
    fn evaluate(&self, graph: &ModelGraph, stats: Option<&CalibrationStats>) -> Result<f64>;
}

impl<F> Evaluator for F
where
    F: Fn(&ModelGraph, Option<&CalibrationStats>) -> Result<f64>,
{
    fn evaluate(&self, graph: &ModelGraph, stats: Option<&CalibrationStats>) -> Result<f64> {
        self(graph, stats)
    }
}
