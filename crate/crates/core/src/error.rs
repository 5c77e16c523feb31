use thiserror::Error;

/// Errors produced anywhere in the hedging pipeline.
#[derive(Debug, Error)]
pub enum HedgeError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("boundary error: {0}")]
    Boundary(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<HedgeError>,
    },
}

impl HedgeError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        HedgeError::InvalidParameter(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        HedgeError::Dimension(msg.into())
    }

    /// Wraps an error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &str) -> Self {
        HedgeError::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &HedgeError {
        match self {
            HedgeError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<csv::Error> for HedgeError {
    fn from(e: csv::Error) -> Self {
        if e.is_io_error() {
            if let csv::ErrorKind::Io(io) = e.into_kind() {
                return HedgeError::Io(io);
            }
            unreachable!("is_io_error implies an Io kind");
        }
        HedgeError::Format(e.to_string())
    }
}

impl From<serde_json::Error> for HedgeError {
    fn from(e: serde_json::Error) -> Self {
        HedgeError::Format(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HedgeError>;
