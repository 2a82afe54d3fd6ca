use thiserror::Error;

use crate::refine::RefineTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("step index {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Every probe had `‖s_cond − s_null‖²` below the degeneracy floor.
    #[error("degenerate guidance at t={t}: all {n_probes} probes have |s_cond - s_null|^2 <= {floor:e}")]
    DegenerateGuidance { t: usize, n_probes: usize, floor: f64 },

    #[error("field does not support the null condition")]
    NullConditionUnsupported,

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("refinement diverged after {} iterations", trace.iterations())]
    RefineDiverged { trace: RefineTrace },

    #[error("missing oracle: {0}")]
    MissingOracle(&'static str),

    #[error("missing trajectory record: {0}")]
    MissingRecord(String),

    #[error("at step t={t}: {source}")]
    AtStep {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration invalid:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("unsupported format version {found} (this build reads version {supported})")]
    VersionSkew { found: u64, supported: u64 },

    #[error("hash mismatch for {what}: expected {expected}, computed {actual}")]
    HashMismatch {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn at_step(self, t: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                t,
                source: Box::new(e),
            },
        }
    }

    /// Configuration errors map to exit code 2, everything else to 3.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
