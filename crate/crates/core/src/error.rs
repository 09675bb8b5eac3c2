use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record {record} in {}: {reason}", path.display())]
    MalformedRecord {
        path: PathBuf,
        record: usize,
        reason: String,
    },

    #[error("non-finite value in record {record} of {}", path.display())]
    NonFiniteValue { path: PathBuf, record: usize },

    #[error("schema violation: {0}")]
    SchemaViolation(String),

    #[error("scene {0} has no ego agent")]
    MissingEgo(String),

    #[error("scene {frame_id} has more than one ego agent")]
    MultipleEgo { frame_id: String },

    #[error("duplicate agent id {agent_id:?} in scene {frame_id}")]
    DuplicateAgentId { frame_id: String, agent_id: String },

    #[error("agent {agent_id:?}: {source}")]
    AgentCloud {
        agent_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("pseudo-images were built on different grids")]
    GridMismatch,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("embedding {index} is not unit norm (norm = {norm})")]
    NonUnitEmbedding { index: usize, norm: f64 },

    #[error("non-finite input: {0}")]
    NonFiniteInput(String),

    #[error("fusion needs at least one agent")]
    EmptyAgentList,

    #[error("unknown gradient-check target {0:?}")]
    UnknownTarget(String),

    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
