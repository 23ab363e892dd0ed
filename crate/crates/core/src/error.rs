use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed container: {0}")]
    Format(String),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("layer pattern error: {0}")]
    Pattern(String),
    #[error("layer ids are not contiguous: missing layer {missing}")]
    IndexGap { missing: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("arity error: {0}")]
    Arity(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("infeasible partition: {blocks} blocks over {layers} layers")]
    Infeasible { blocks: usize, layers: usize },
    #[error("search space of {candidates} candidates exceeds the enumeration budget")]
    Budget { candidates: u128 },
    #[error("constraint violated: {0}")]
    Constraint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error(
        "degenerate objective spec {objective}: expert and base score coincide on {benchmark}"
    )]
    DegenerateSpec {
        objective: String,
        benchmark: String,
    },
    #[error("missing score for benchmark {0}")]
    MissingScore(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("invalid score for benchmark {benchmark}: {value}")]
    InvalidScore { benchmark: String, value: f64 },
    #[error("evaluator timed out after {0:.1}s")]
    Timeout(f64),
    #[error("invalid reference point: {0}")]
    Reference(String),
    #[error("dimension {requested} exceeds the supported maximum {max}")]
    Dimension { requested: usize, max: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("the Pareto front is empty")]
    EmptyFront,
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the failure stems from the caller's input rather than a
    /// numerical or environmental problem.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Numerical(_) | Error::Io { .. })
            || matches!(self, Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
    }
}
