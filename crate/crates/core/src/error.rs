use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular mass matrix at state {state:?}")]
    SingularConfiguration { state: [f64; 6] },

    #[error("simulation diverged after {steps} physics steps")]
    SimulationDivergence { steps: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("riccati synthesis failed: {0}")]
    SynthesisFailure(String),

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("degenerate normal model: rejection cap of {cap} draws exceeded")]
    DegenerateModel { cap: usize },

    #[error("perplexity calibration failed for point {point}")]
    Calibration { point: usize },

    #[error("optimization failure: {0}")]
    OptimizationFailure(String),

    #[error("single-class dataset: every sample is labeled {label}")]
    SingleClass { label: u8 },

    #[error("training failure: {0}")]
    TrainingFailure(String),

    #[error("empty sample set: {0}")]
    EmptySamples(&'static str),

    #[error("toy instance has {states} states, limit is {limit}")]
    ToyTooLarge { states: usize, limit: usize },

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used for the one-line CLI error and the C error codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::SingularConfiguration { .. } => "singular_configuration",
            Error::SimulationDivergence { .. } => "simulation_divergence",
            Error::InvalidParameter(_) => "invalid_parameter",
            Error::SynthesisFailure(_) => "synthesis_failure",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::DegenerateModel { .. } => "degenerate_model",
            Error::Calibration { .. } => "calibration",
            Error::OptimizationFailure(_) => "optimization_failure",
            Error::SingleClass { .. } => "single_class",
            Error::TrainingFailure(_) => "training_failure",
            Error::EmptySamples(_) => "empty_samples",
            Error::ToyTooLarge { .. } => "toy_too_large",
            Error::Verification(_) => "verification_failed",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
            Error::TomlDe(_) | Error::TomlSer(_) => "config",
        }
    }
}
