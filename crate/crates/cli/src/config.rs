//! Resolved run configuration. The JSON config file deserializes into
//! [`RunConfig`]; command-line flags override it; every report embeds the
//! result.

use std::fs;
use std::path::Path;

use mpq_core::calibration::Sampling;
use mpq_core::harness::HarnessConfig;
use mpq_core::harness::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibSweepConfig {
    /// Ascending calibration-set sizes.
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub sampling: Sampling,
}

impl Default for CalibSweepConfig {
    fn default() -> Self {
        Self {
            sizes: vec![4, 16, 64, 256, 1024],
            seeds: (0..5).collect(),
            sampling: Sampling::Independent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Base seed; drives data generation, weight init and training order.
    pub seed: u64,
    pub harness: HarnessConfig,
    pub pipeline: PipelineConfig,
    pub calib_sweep: CalibSweepConfig,
    /// Built-in latency fixture used when no table file is given.
    pub latency_device: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            harness: HarnessConfig::default(),
            pipeline: PipelineConfig::default(),
            calib_sweep: CalibSweepConfig::default(),
            latency_device: "jetson_orin".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Propagates `seed` into every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.harness.data_seed = seed;
        self.harness.model_seed = seed;
        self.harness.pretrain.seed = seed;
        self
    }
}
