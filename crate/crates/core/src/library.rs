//! Shared lifecycle types for the two libraries.
//!
//! Both libraries are single-writer during the build phase and immutable
//! after [`freeze`](crate::skills::SkillLibrary::freeze); retrieval requires
//! the frozen inverted index.

use thiserror::Error;

use crate::chain::ChainError;

/// Result of inserting into a library during the build phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AddOutcome {
    Added(String),
    /// Content already present; carries the existing id.
    Duplicate(String),
    /// Item failed validation (e.g. uncoupled QA pair in strict mode).
    Rejected {
        reason: String,
    },
}

impl AddOutcome {
    /// The stored id, if the item is in the library.
    pub fn id(&self) -> Option<&str> {
        match self {
            AddOutcome::Added(id) | AddOutcome::Duplicate(id) => Some(id),
            AddOutcome::Rejected { .. } => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LibraryError {
    #[error("library is frozen; no further inserts")]
    Frozen,
    #[error("library must be frozen before retrieval")]
    NotFrozen,
    #[error("sample size {requested} exceeds library size {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("invalid chain: {0}")]
    InvalidChain(#[from] ChainError),
}
