use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown domain {0}")]
    UnknownDomain(usize),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("agent combination weights for domain {domain} sum to zero")]
    DegenerateWeights { domain: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("loss undefined: every sample is masked")]
    UndefinedLoss,

    #[error("batch violates the sampler contract: {0}")]
    SamplerContract(String),

    #[error("loss composition: {0}")]
    Composition(String),

    #[error("cannot sample domain {domain}: {reason}")]
    Sampling { domain: usize, reason: String },

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("training diverged at {stage} epoch {epoch} step {step}: {detail}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
