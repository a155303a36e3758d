use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GagError> = std::result::Result<T, E>;

/// Every failure the library can report. `kind()` gives the stable tag used
/// in the CLI's JSON error output.
#[derive(Debug, Error)]
pub enum GagError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("degenerate loss mask: no unmasked positions")]
    DegenerateMask,
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("frozen parameters: {0}")]
    Frozen(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenRange { id: u32, vocab: usize },
    #[error("input length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("insufficient data: {points} points for {clusters} clusters")]
    InsufficientData { points: usize, clusters: usize },
    #[error("encoder fingerprint mismatch: bank has {bank}, registry expects {registry}")]
    Compatibility { bank: String, registry: String },
    #[error("base checkpoint changed: expected {expected}, found {found}")]
    BaseMismatch { expected: String, found: String },
    #[error("route {0} is already attached")]
    Conflict(u32),
    #[error("route {0} is not attached")]
    UnknownRoute(u32),
    #[error("routing integrity: {0}")]
    RoutingIntegrity(String),
    #[error("corrupt file {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },
    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    Kind { expected: String, found: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GagError {
    pub fn kind(&self) -> &'static str {
        match self {
            GagError::Dimension(_) => "dimension",
            GagError::DegenerateMask => "degenerate_mask",
            GagError::Numeric(_) => "numeric",
            GagError::Frozen(_) => "frozen",
            GagError::TokenRange { .. } => "token_range",
            GagError::Length { .. } => "length",
            GagError::Config(_) => "config",
            GagError::Template(_) => "template",
            GagError::Input(_) => "input",
            GagError::InsufficientData { .. } => "insufficient_data",
            GagError::Compatibility { .. } => "compatibility",
            GagError::BaseMismatch { .. } => "base_mismatch",
            GagError::Conflict(_) => "conflict",
            GagError::UnknownRoute(_) => "unknown_route",
            GagError::RoutingIntegrity(_) => "routing_integrity",
            GagError::Corruption { .. } => "corruption",
            GagError::Kind { .. } => "kind",
            GagError::Data(_) => "data",
            GagError::Spec(_) => "spec",
            GagError::MissingArtifact(_) => "missing_artifact",
            GagError::Io { .. } => "io",
            GagError::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GagError::Io {
            path: path.into(),
            source,
        }
    }
}
