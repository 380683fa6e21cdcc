//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("token id {id} out of range for vocab of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("operand {value} outside task range [{lo}, {hi}]")]
    OperandOutOfRange { value: i64, lo: i64, hi: i64 },

    #[error("unknown site {0}")]
    UnknownSite(String),

    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },

    #[error("singular matrix in {op}; retry with ridge epsilon > 0")]
    Singular { op: &'static str },

    #[error("rank deficiency beyond ridge tolerance in {op}")]
    RankDeficient { op: &'static str },

    #[error("not enough {what}: need {need}, have {have}")]
    Insufficient {
        what: &'static str,
        need: usize,
        have: usize,
    },

    #[error("dump format error: {0}")]
    DumpFormat(String),

    #[error("dump version mismatch: file has {found}, reader supports {supported}")]
    DumpVersion { found: u32, supported: u32 },

    #[error("missing artifact {path}; produce it with `{producer}` first")]
    MissingArtifact { path: String, producer: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("stage {stage} failed: {source}")]
    StageFailed {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}
