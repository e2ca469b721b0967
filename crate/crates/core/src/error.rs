use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("degenerate rotation: quaternion norm {norm:e} at gaussian {index}")]
    DegenerateRotation { index: usize, norm: f64 },

    #[error("degenerate joint axis (norm {0:e})")]
    DegenerateAxis(f64),

    #[error("degenerate deformation field: all displacement norms equal ({0:e}), no motion detected")]
    DegenerateField(f64),

    #[error("degenerate movable mask: {count} movable gaussians, need at least {required}")]
    DegenerateMask { count: usize, required: usize },

    #[error("empty point set: {0}")]
    EmptySet(&'static str),

    #[error("empty cloud after {0}")]
    EmptyCloud(&'static str),

    #[error("non-finite {what} in group `{group}`")]
    NonFiniteGradient { group: String, what: &'static str },

    #[error("non-finite loss in {stage} at iteration {iteration} (camera {camera})")]
    NonFiniteLoss {
        stage: &'static str,
        iteration: usize,
        camera: usize,
    },

    #[error("divergence in {stage} at iteration {iteration}: loss {loss:e} exceeded 10x initial {initial:e}")]
    Divergence {
        stage: &'static str,
        iteration: usize,
        loss: f64,
        initial: f64,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("failed to decode {path}: {message}")]
    Decode { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
