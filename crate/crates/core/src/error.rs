use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("non-finite value produced by node {node} ({op})")]
    Numeric { node: usize, op: &'static str },

    #[error("configuration error: {key}: {constraint}")]
    Config { key: String, constraint: String },

    #[error("value iteration did not converge after {iterations} iterations (last residual {last_residual:e})")]
    NonConvergence { iterations: usize, last_residual: f64 },

    #[error("contraction ratio undefined: the two value tables are identical")]
    UndefinedRatio,

    #[error("value table is not a fixed point: residual {residual:e} exceeds {limit:e}")]
    StaleInput { residual: f64, limit: f64 },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("intractable configuration: {0}")]
    Size(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("training aborted at iteration {iteration} in {stage} stage: {reason}")]
    Aborted {
        iteration: usize,
        stage: &'static str,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            constraint: constraint.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
