//! Two-stage retrieval over the frozen libraries.
//!
//! Stage one is BM25 over an inverted index; stage two optionally reorders a
//! widened candidate pool with the trained feature reranker. Experience is
//! retrieved at the question level, skills per transition through a
//! step-conditioned weighted query.

use thiserror::Error;

use crate::chain::Transition;
use crate::experience::{ExperienceItem, ExperienceLibrary};
use crate::index::rank_by_score;
use crate::library::LibraryError;
use crate::num::Real;
use crate::rerank::{features, RerankerParams};
use crate::skills::{SkillLibrary, SkillRule};
use crate::text::{jaccard, token_set, TokenCounts};

/// Candidate pool widening factor between the BM25 stage and the reranker.
pub const FIRST_STAGE_FACTOR: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RetrievalError {
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Library(#[from] LibraryError),
}

/// Knobs for both retrieval stages and the alignment filter.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RetrievalConfig {
    /// Experience items retrieved per query (top-M).
    pub m: usize,
    /// Skill candidates retrieved per transition (top-K).
    pub k: usize,
    /// Inclusive alignment threshold in [0, 1].
    pub tau: f64,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub rerank_enabled: bool,
    /// Include the case context in step-conditioned queries. Off by default:
    /// the step query is built from (q, transition).
    pub include_context_in_step_query: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            m: 4,
            k: 5,
            tau: 0.2,
            bm25_k1: 1.2,
            bm25_b: 0.75,
            rerank_enabled: false,
            include_context_in_step_query: false,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.m == 0 {
            return Err(RetrievalError::InvalidConfig("m must be >= 1".into()));
        }
        if self.k == 0 {
            return Err(RetrievalError::InvalidConfig("k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(RetrievalError::InvalidConfig(format!(
                "tau must be in [0, 1], got {}",
                self.tau
            )));
        }
        if self.bm25_k1 < 0.0 || !(0.0..=1.0).contains(&self.bm25_b) {
            return Err(RetrievalError::InvalidConfig(
                "bm25_k1 must be >= 0 and bm25_b in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// An experience hit with the score that ranked it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredExperience<'a> {
    pub item: &'a ExperienceItem,
    pub score: f64,
}

/// A skill candidate for one transition, with its retrieval score and its
/// step-alignment score against that transition.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSkill<'a> {
    pub skill: &'a SkillRule,
    pub retrieval_score: f64,
    pub align: f64,
}

/// Query-level experience retrieval: BM25 over question+context tokens,
/// optional rerank of the widened pool, top-M, ties broken by item id.
pub fn retrieve_experience<'a>(
    question: &str,
    context: &str,
    library: &'a ExperienceLibrary,
    config: &RetrievalConfig,
    reranker: Option<&RerankerParams<f64>>,
) -> Result<Vec<ScoredExperience<'a>>, RetrievalError> {
    config.validate()?;
    let index = library.index()?;
    let mut query = TokenCounts::new();
    for token in token_set(question).into_iter().chain(token_set(context)) {
        query.insert(token, 1);
    }
    let scores: Vec<f64> = index.score_all(&query, config.bm25_k1, config.bm25_b);
    let pool = rank_by_score(
        &scores,
        |i| library.get(i).expect("indexed item").id.as_str(),
        config.m.saturating_mul(FIRST_STAGE_FACTOR),
    );
    let ranked = apply_reranker(
        pool,
        &query,
        &scores,
        |i| library.doc_tokens(i),
        |i| library.get(i).expect("indexed item").id.as_str(),
        config,
        reranker,
    );
    Ok(ranked
        .into_iter()
        .take(config.m)
        .map(|(i, score)| ScoredExperience {
            item: library.get(i).expect("indexed item"),
            score,
        })
        .collect())
}

/// Step-conditioned query: transition head and tail tokens weighted 2, the
/// question's tokens weighted 1 (additively), and optionally the context's.
pub fn step_query(
    question: &str,
    context: Option<&str>,
    transition: &Transition,
    include_context: bool,
) -> TokenCounts {
    let mut counts = TokenCounts::new();
    let head = transition.head_tokens();
    let tail = transition.tail_tokens();
    for token in head.union(&tail) {
        *counts.entry(token.clone()).or_insert(0) += 2;
    }
    for token in token_set(question) {
        *counts.entry(token).or_insert(0) += 1;
    }
    if include_context {
        if let Some(ctx) = context {
            for token in token_set(ctx) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Transition-conditioned skill retrieval: BM25 over skill step texts with
/// the step query, optional rerank, top-K, each hit carrying its alignment
/// score against the transition.
pub fn retrieve_skills<'a>(
    question: &str,
    context: &str,
    transition: &Transition,
    library: &'a SkillLibrary,
    config: &RetrievalConfig,
    reranker: Option<&RerankerParams<f64>>,
) -> Result<Vec<ScoredSkill<'a>>, RetrievalError> {
    let context = (!context.trim().is_empty()).then_some(context);
    let query = step_query(
        question,
        context,
        transition,
        config.include_context_in_step_query,
    );
    let ranked = rank_skills(&query, library, config, reranker, config.k)?;
    Ok(ranked
        .into_iter()
        .map(|(skill, retrieval_score)| ScoredSkill {
            skill,
            retrieval_score,
            align: align_score::<f64>(skill, transition),
        })
        .collect())
}

/// Question-level skill retrieval (no transition conditioning); the baseline
/// that step-aware retrieval is measured against.
pub fn retrieve_skills_by_question<'a>(
    question: &str,
    context: &str,
    library: &'a SkillLibrary,
    config: &RetrievalConfig,
    reranker: Option<&RerankerParams<f64>>,
) -> Result<Vec<(&'a SkillRule, f64)>, RetrievalError> {
    let mut query = TokenCounts::new();
    for token in token_set(question).into_iter().chain(token_set(context)) {
        query.insert(token, 1);
    }
    rank_skills(&query, library, config, reranker, config.k)
}

fn rank_skills<'a>(
    query: &TokenCounts,
    library: &'a SkillLibrary,
    config: &RetrievalConfig,
    reranker: Option<&RerankerParams<f64>>,
    k: usize,
) -> Result<Vec<(&'a SkillRule, f64)>, RetrievalError> {
    config.validate()?;
    let index = library.index()?;
    let scores: Vec<f64> = index.score_all(query, config.bm25_k1, config.bm25_b);
    let pool = rank_by_score(
        &scores,
        |i| library.get(i).expect("indexed rule").id.as_str(),
        k.saturating_mul(FIRST_STAGE_FACTOR),
    );
    let ranked = apply_reranker(
        pool,
        query,
        &scores,
        |i| library.doc_tokens(i),
        |i| library.get(i).expect("indexed rule").id.as_str(),
        config,
        reranker,
    );
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(i, score)| (library.get(i).expect("indexed rule"), score))
        .collect())
}

/// Reorders the candidate pool by reranker score when enabled and trained;
/// otherwise keeps the BM25 order. Returns (doc index, ranking score).
fn apply_reranker<'f, F, G, K>(
    pool: Vec<usize>,
    query: &TokenCounts,
    bm25_scores: &[f64],
    doc_tokens: F,
    tie_break: G,
    config: &RetrievalConfig,
    reranker: Option<&RerankerParams<f64>>,
) -> Vec<(usize, f64)>
where
    F: Fn(usize) -> &'f TokenCounts,
    G: Fn(usize) -> K,
    K: Ord,
{
    match reranker {
        Some(params) if config.rerank_enabled && params.is_trained() => {
            let mut rescored: Vec<(usize, f64)> = pool
                .into_iter()
                .map(|i| {
                    let f = features(query, doc_tokens(i), bm25_scores[i]);
                    (i, params.score(&f))
                })
                .collect();
            rescored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then_with(|| tie_break(a.0).cmp(&tie_break(b.0)))
            });
            rescored
        }
        _ => pool.into_iter().map(|i| (i, bm25_scores[i])).collect(),
    }
}

/// Step-level alignment of a skill against a transition: the mean of the
/// best per-step Jaccard with the head tokens and with the tail tokens,
/// clamped to [0, 1].
pub fn align_score<R: Real>(skill: &SkillRule, transition: &Transition) -> R {
    let head = transition.head_tokens();
    let tail = transition.tail_tokens();
    let best = |target: &crate::text::TokenSet| -> R {
        skill
            .steps
            .iter()
            .map(|step| jaccard::<R>(&step.tokens(), target))
            .fold(R::zero(), |acc, j| if j > acc { j } else { acc })
    };
    let two = R::from_config(2.0);
    let score = (best(&head) + best(&tail)) / two;
    score.max(R::zero()).min(R::one())
}

/// Keeps candidates with `align >= tau` (inclusive), preserving rank order.
pub fn filter_aligned<'a>(candidates: &[ScoredSkill<'a>], tau: f64) -> Vec<ScoredSkill<'a>> {
    candidates
        .iter()
        .filter(|c| c.align >= tau)
        .cloned()
        .collect()
}
