use std::path::PathBuf;

use crate::remote::RemoteError;
use crate::types::{MaskPattern, Violation};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid {what}: {}", fmt_violations(.violations))]
    Invalid {
        what: &'static str,
        violations: Vec<Violation>,
    },

    #[error("argument out of range: {0}")]
    Domain(String),

    #[error("infeasible size: {0}")]
    Infeasible(String),

    /// The conditioning event has probability zero under the joint.
    #[error("conditioning event has zero probability")]
    ZeroMass,

    #[error("position {position} outside sequence of length {length}")]
    Range { position: usize, length: usize },

    #[error("pattern {pattern} does not fit a context of {len} tokens (needs at least {required})")]
    PatternDoesNotFit {
        pattern: MaskPattern,
        len: usize,
        required: usize,
    },

    #[error("degenerate quadruple: {0}")]
    Degenerate(String),

    #[error("row {0} was skipped and cannot take part in a subset")]
    SkippedRow(usize),

    #[error("empty subset")]
    EmptySubset,

    #[error("no applicable pattern for this instance")]
    EmptyMatrix,

    #[error("provider capability exceeded: {0}")]
    Capability(String),

    #[error("provider returned a non-finite score for candidate {candidate}")]
    NonFiniteScore { candidate: usize },

    #[error(transparent)]
    Remote(#[from] RemoteError),

    #[error("{path}: schema violation\n{}", .lines.join("\n"))]
    Schema { path: PathBuf, lines: Vec<String> },

    #[error("invalid spec `{spec}`: {reason}")]
    Spec { spec: String, reason: String },

    #[error("invariant violated: {0}")]
    InvariantViolated(String),

    #[error("too many failed instances: {failed} of {total}")]
    ErrorBudget { failed: usize, total: usize },

    #[error("{path}: {source}")]
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
}

fn fmt_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}
