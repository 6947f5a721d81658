use thiserror::Error;

use crate::backend::BackendError;
use crate::combination::CombineError;
use crate::dataset::DataError;
use crate::metrics::MetricError;
use crate::span::SpanError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("search returned no passages for {0:?}")]
    EmptyResult(String),
    #[error("{stage}: could not parse model reply after {retries} retr{}: {message}", if *.retries == 1 { "y" } else { "ies" })]
    LlmParse { stage: &'static str, message: String, retries: u32, raw: Vec<String> },
    #[error("{stage}: reply has no <{tag}> block after {retries} retr{}", if *.retries == 1 { "y" } else { "ies" })]
    MissingTag { stage: &'static str, tag: &'static str, retries: u32, raw: Vec<String> },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Span(#[from] SpanError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Combine(#[from] CombineError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    /// Raw model replies attached to the error, for the failure sidecar.
    pub fn raw_outputs(&self) -> &[String] {
        match self {
            Error::LlmParse { raw, .. } | Error::MissingTag { raw, .. } => raw,
            _ => &[],
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
