use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("embedding provider `{provider}` unavailable: {reason}")]
    ProviderUnavailable { provider: String, reason: String },

    #[error("embedding provider contract violated: {0}")]
    ProviderContract(String),

    #[error("malformed sample `{id}`: {reason}")]
    MalformedSample { id: String, reason: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("response is empty after normalization")]
    EmptyResponse,

    #[error("backend configuration error: {0}")]
    BackendConfig(String),

    #[error("authentication failed (HTTP {status}): {body}")]
    Auth { status: u16, body: String },

    #[error("rate limit still exceeded after {attempts} attempts")]
    RateLimited { attempts: u32 },

    #[error("malformed backend reply: {0}")]
    MalformedReply(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("cache integrity error for key {key}: {reason}")]
    CacheIntegrity { key: String, reason: String },

    #[error("all {attempted} strategies failed for sample `{sample_id}`: {}", errors.join("; "))]
    AllStrategiesFailed {
        sample_id: String,
        attempted: usize,
        errors: Vec<String>,
    },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("sample `{id}`: invalid field `{field}`: {message}")]
    Validation {
        id: String,
        field: String,
        message: String,
    },

    #[error("numeric degeneracy: {0}")]
    NumericDegeneracy(String),

    #[error("non-finite loss {loss} at step {step} (group `{group_id}`)")]
    NonFiniteLoss {
        group_id: String,
        step: usize,
        loss: f64,
    },

    #[error("cannot parse ranking reply ({reason}); raw reply: {raw}")]
    RankParse { reason: String, raw: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable snake_case tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::ProviderUnavailable { .. } => "provider_unavailable",
            Error::ProviderContract(_) => "provider_contract",
            Error::MalformedSample { .. } => "malformed_sample",
            Error::Index(_) => "index",
            Error::Contract(_) => "contract",
            Error::EmptyResponse => "empty_response",
            Error::BackendConfig(_) => "backend_config",
            Error::Auth { .. } => "auth",
            Error::RateLimited { .. } => "rate_limited",
            Error::MalformedReply(_) => "malformed_reply",
            Error::Transport(_) => "transport",
            Error::CacheIntegrity { .. } => "cache_integrity",
            Error::AllStrategiesFailed { .. } => "all_strategies_failed",
            Error::Parse { .. } => "parse",
            Error::Validation { .. } => "validation",
            Error::NumericDegeneracy(_) => "numeric_degeneracy",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::RankParse { .. } => "rank_parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Pipeline(_) => "pipeline",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
