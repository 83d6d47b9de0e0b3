use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("graph has no edges")]
    EmptyGraph,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("cannot normalize zero vector for item {item}")]
    ZeroVector { item: u32 },

    #[error("user {user} has no training engagements")]
    EmptyProfile { user: u32 },

    #[error("user {user} has no centroid in cluster {cluster}")]
    AbsentCentroid { user: u32, cluster: u32 },

    #[error("relevant items of user {user} in cluster {cluster} sum to a zero vector")]
    DegenerateCentroid { user: u32, cluster: u32 },

    #[error("smoothed query embedding of user {user} in cluster {cluster} has vanishing norm")]
    DegenerateEmbedding { user: u32, cluster: u32 },

    #[error("non-finite parameter after epoch {epoch}, edge {edge}")]
    NonFinite { epoch: usize, edge: usize },

    #[error("infeasible transport marginals: supply {supply} vs demand {demand}")]
    InfeasibleMarginals { supply: f64, demand: f64 },

    #[error("no users with a non-empty holdout")]
    NoEligibleUsers,

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("stage `{stage}` needs `{prerequisite}` to run first")]
    MissingStage { stage: String, prerequisite: String },

    #[error("stale artifact from stage `{stage}`: {reason}; rerun `{stage}`")]
    StaleArtifact { stage: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_)
            | Error::Config(_)
            | Error::MissingStage { .. }
            | Error::StaleArtifact { .. } => 1,
            Error::NonFinite { .. } => 3,
            _ => 2,
        }
    }
}
