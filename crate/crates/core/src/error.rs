use std::path::PathBuf;

/// Errors produced by the optimization core.
#[derive(Debug, thiserror::Error)]
pub enum TsoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot draw {requested} distinct strategies of length {length}: only {available} exist")]
    InfeasiblePool {
        requested: usize,
        length: usize,
        available: u128,
    },

    #[error("assembly training diverged at epoch {epoch} (loss = {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },

    #[error("iteration {iteration}: no new strategy could be generated or sampled")]
    DegenerateIteration { iteration: usize },

    #[error("iteration {iteration}: {source}")]
    InIteration {
        iteration: usize,
        #[source]
        source: Box<TsoError>,
    },

    #[error("dataset error in {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl TsoError {
    /// True if this error, or the one it wraps, is a training divergence.
    pub fn is_divergence(&self) -> bool {
        match self {
            Self::TrainingDiverged { .. } => true,
            Self::InIteration { source, .. } => source.is_divergence(),
            _ => false,
        }
    }

    pub(crate) fn in_iteration(self, iteration: usize) -> Self {
        Self::InIteration {
            iteration,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = TsoError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> TsoError {
    TsoError::InvalidArgument(msg.into())
}
