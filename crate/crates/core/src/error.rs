use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("optimizer kind mismatch: expected {expected}, found {found}")]
    OptimizerKind { expected: &'static str, found: &'static str },

    #[error("layer {layer}: {detail}")]
    Layer { layer: usize, detail: String },

    #[error("stale gate pair for layer {layer}: sampled at step {sampled}, layer is at step {current}")]
    StalePair { layer: usize, sampled: u64, current: u64 },

    #[error("missing latency entry for layer {layer}, candidate `{candidate}`")]
    MissingLatency { layer: usize, candidate: String },

    #[error("latency table is missing {} entries: {}", .0.len(), format_keys(.0))]
    IncompleteTable(Vec<(usize, String)>),

    #[error("negative latency {ms} for layer {layer}, candidate `{candidate}`")]
    NegativeLatency { layer: usize, candidate: String, ms: f64 },

    #[error("device {0} received no samples")]
    EmptyDevice(usize),

    #[error("parameter sets differ; only on one side: {0:?}")]
    ParamMismatch(Vec<String>),

    #[error("round {round}: every participating device failed")]
    RoundAborted { round: usize },

    #[error("device {device} is missing a tag")]
    MissingTag { device: usize },

    #[error("search space mismatch: checkpoint {checkpoint}, config {config}")]
    SpaceMismatch { checkpoint: String, config: String },

    #[error("malformed file {path}: {detail} (at byte {offset})")]
    Format { path: PathBuf, offset: u64, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_keys(keys: &[(usize, String)]) -> String {
    keys.iter().map(|(l, c)| format!("({l}, {c})")).collect::<Vec<_>>().join(", ")
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Invalid(_) => "invalid",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::MissingGrad(_) => "missing_grad",
            Error::OptimizerKind { .. } => "optimizer_kind",
            Error::Layer { .. } => "layer",
            Error::StalePair { .. } => "stale_pair",
            Error::MissingLatency { .. } => "missing_latency",
            Error::IncompleteTable(_) => "incomplete_table",
            Error::NegativeLatency { .. } => "negative_latency",
            Error::EmptyDevice(_) => "empty_device",
            Error::ParamMismatch(_) => "param_mismatch",
            Error::RoundAborted { .. } => "round_aborted",
            Error::MissingTag { .. } => "missing_tag",
            Error::SpaceMismatch { .. } => "space_mismatch",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
