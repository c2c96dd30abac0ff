use thiserror::Error;

use crate::quant::DtypeTag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("layer {index} ({name}) runs in INT8 but has no calibration entry")]
    MissingQuantParams { index: usize, name: String },

    #[error("layer index {0} does not exist in the graph")]
    UnknownLayer(usize),

    #[error("unsupported model format version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checksum mismatch: manifest says {expected}, blob hashes to {actual}")]
    Checksum { expected: String, actual: String },

    #[error("latency table `{device}` has no entry for layer {layer} at {dtype}")]
    LatencyMissing {
        device: String,
        layer: usize,
        dtype: DtypeTag,
    },

    #[error("exhaustive search needs {count} subsets, refusing (limit {limit})")]
    SearchTooLarge { count: u128, limit: u128 },

    #[error("sensitivity sweep: {} of {total} layer evaluations failed (first: layer {}: {})",
        .failures.len(), .failures[0].0, .failures[0].1)]
    SweepFailed {
        total: usize,
        failures: Vec<(usize, String)>,
    },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f32 },

    #[error("pearson correlation is undefined: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
