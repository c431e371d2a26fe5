//! Step-wise reasoning annotation: prompt, backends, parser and the parallel
//! annotation driver.

mod annotate;
mod backend;
mod parse;
mod prompt;
mod remote;

use thiserror::Error;

use crate::data::DataError;

pub use annotate::{annotate_dataset, annotate_dataset_with, annotate_in_memory, AnnotateOptions, AnnotationReport, StepFailure};
pub use backend::{rule_based_generate, RuleBasedTeacher, TeacherBackend};
pub use parse::{parse_trace, render_trace_text};
pub use prompt::{build_prompt, SECTION_HEADERS};
pub use remote::{encode_image, RemoteTeacher, DEFAULT_TIMEOUT_S};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("teacher output is missing section(s): {missing}")]
    Parse { missing: String, raw: String },
    #[error("teacher backend failed: {0}")]
    Backend(String),
    #[error("teacher backend misconfigured: {0}")]
    Config(String),
    #[error("workers must be at least 1")]
    NoWorkers,
    #[error(transparent)]
    Data(#[from] DataError),
}

impl TeacherError {
    /// Raw teacher text carried by a parse failure.
    pub fn raw(&self) -> Option<&str> {
        match self {
            TeacherError::Parse { raw, .. } => Some(raw),
            _ => None,
        }
    }
}
