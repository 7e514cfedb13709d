use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid entity name {0:?}")]
    InvalidEntity(String),

    #[error("duplicate entity {0:?} in base graph spec")]
    DuplicateEntity(String),

    #[error("unknown relation {0:?}")]
    UnknownRelation(String),

    #[error("{count} triplets exceed the limit of {limit}")]
    TooManyTriplets { count: usize, limit: usize },

    #[error("graph has {nodes} nodes, more than the pad target {target}")]
    GraphTooLarge { nodes: usize, target: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("representation queue is empty")]
    ColdQueue,

    #[error("token id {id} outside vocabulary of size {vocab}")]
    OutOfVocab { id: usize, vocab: usize },

    #[error("token sequence must start with {0}")]
    MissingPrefix(&'static str),

    #[error("entity {0:?} cannot be resolved by the embedding table")]
    UnresolvableEntity(String),

    #[error("image {height}x{width} is not divisible by patch size {patch}")]
    IndivisibleImage {
        height: usize,
        width: usize,
        patch: usize,
    },

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("loss component {name} is not finite ({value})")]
    NonFiniteLoss { name: &'static str, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("checkpoint config hash {found} does not match config hash {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short stable identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidEntity(_) => "invalid_entity",
            Error::DuplicateEntity(_) => "duplicate_entity",
            Error::UnknownRelation(_) => "unknown_relation",
            Error::TooManyTriplets { .. } => "too_many_triplets",
            Error::GraphTooLarge { .. } => "graph_too_large",
            Error::Parse { .. } => "parse",
            Error::Shape { .. } => "shape",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ColdQueue => "cold_queue",
            Error::OutOfVocab { .. } => "out_of_vocab",
            Error::MissingPrefix(_) => "missing_prefix",
            Error::UnresolvableEntity(_) => "unresolvable_entity",
            Error::IndivisibleImage { .. } => "indivisible_image",
            Error::NonPositiveTemperature(_) => "non_positive_temperature",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Config(_) => "config",
            Error::MissingFile(_) => "missing_file",
            Error::HashMismatch { .. } => "hash_mismatch",
            Error::Checkpoint(_) => "checkpoint",
            Error::Empty(_) => "empty_input",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
