//! Step-indexed reasoning engine: solved-case experience and procedural
//! skill libraries, two-stage lexical retrieval with a trainable feature
//! reranker, a test-time-adaptable transition model, and the verification
//! pipeline that ties them together.
//!
//! Numeric kernels are generic over [`num::Real`] (`f32`/`f64`); the
//! pipeline and all serialized artifacts use the `f64` aliases below.

pub mod chain;
pub mod config;
pub mod eval;
pub mod experience;
pub mod index;
pub mod ingest;
pub mod library;
pub mod model;
pub mod num;
pub mod pipeline;
pub mod remote;
pub mod rerank;
pub mod retrieval;
pub mod skills;
pub mod snapshot;
pub mod synth;
pub mod text;

pub use chain::{ChainError, GroundingReport, LogicalChain, Transition};
pub use config::{ConfigError, EngineConfig};
pub use experience::{AuditReport, ExperienceItem, ExperienceLibrary, NewExperience};
pub use library::{AddOutcome, LibraryError};
pub use model::{AdaptConfig, AdaptableModel, ModelError, TraceSample};
pub use pipeline::{ComponentMask, Engine, EvidenceBundle, PipelineError, Query};
pub use retrieval::{RetrievalConfig, RetrievalError};
pub use skills::{SkillLibrary, SkillRule, SkillStep, StepRole};

/// The concrete transition-table model the pipeline ships with.
pub type Model = model::ModelParams<f64>;
/// Trained reranker weights at pipeline precision.
pub type Reranker = rerank::RerankerParams<f64>;
