use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("unknown phoneme label `{0}`")]
    UnknownPhoneme(String),
    #[error("generation error for speaker {speaker}: {reason}")]
    Generation { speaker: usize, reason: String },
    #[error("degenerate subject {0}: max intensity equals min intensity")]
    DegenerateSubject(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("aggregation error: {0}")]
    Aggregation(String),
    #[error("plot error: {0}")]
    Plot(String),
    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short category used for process exit diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) | Error::Contract(_) => "contract",
            Error::Domain(_) | Error::UnknownPhoneme(_) => "domain",
            Error::Generation { .. } | Error::DegenerateSubject(_) => "data",
            Error::Config(_) | Error::Parse { .. } => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Diverged { .. } => "training",
            Error::Evaluation(_) | Error::Aggregation(_) => "evaluation",
            Error::Plot(_) => "plot",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
