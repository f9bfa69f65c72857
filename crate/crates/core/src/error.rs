use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarmoniaError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HarmoniaError {
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("layout error: {0}")]
    Layout(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid scale at channel {channel}: {value}")]
    InvalidScale { channel: usize, value: f64 },
    /// The objective became non-finite. Carries the best scale vector seen.
    #[error("calibration diverged after {iterations} iterations")]
    CalibrationDiverged { iterations: usize, best: Vec<f64> },
    #[error("tiling error: {0}")]
    Tiling(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl HarmoniaError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub(crate) fn layout(msg: impl Into<String>) -> Self {
        Self::Layout(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }
}
