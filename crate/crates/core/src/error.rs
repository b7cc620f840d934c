use std::io;

use thiserror::Error;

/// Errors raised by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum DaclError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("neighbor search over an empty pool")]
    EmptyPool,

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("optimization did not converge after {steps} steps (residual {residual:.3e})")]
    NonConvergence { steps: usize, residual: f64 },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<DaclError>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DaclError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DaclError::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        DaclError::Config { field: field.into(), reason: reason.into() }
    }

    /// True for errors caused by user-supplied configuration.
    pub fn is_config(&self) -> bool {
        match self {
            DaclError::Config { .. } => true,
            DaclError::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T, E = DaclError> = std::result::Result<T, E>;

/// Tags an error with the training stage that produced it.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| DaclError::Stage { stage, source: Box::new(e) })
    }
}
