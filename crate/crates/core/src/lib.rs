//! Hallucinated-span detection for LLM answers.
//!
//! The pipeline retrieves verification context, asks an LLM which parts of an
//! answer are unsupported, and maps the verdict back onto character spans of
//! the answer. Around it sit the task metrics, a multi-system combiner and a
//! small prompt optimizer.

pub mod ask;
pub mod backend;
pub mod combination;
pub mod config;
pub mod dataset;
pub mod detectors;
pub mod error;
pub mod io;
pub mod mapping;
pub mod metrics;
pub mod optimizer;
pub mod pipeline;
pub mod prompts;
pub mod retrieval;
pub mod span;

pub use error::{Error, Result};
