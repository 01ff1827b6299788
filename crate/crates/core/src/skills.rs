//! Procedural skill rules and their indexed library.
//!
//! A skill is a guideline-style rule normalized into ordered steps
//! (conditions, diagnostics, findings, actions) that step-conditioned
//! retrieval can apply as a gate on a single reasoning transition.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{ChainError, LogicalChain, CANONICAL_ARROW};
use crate::index::InvertedIndex;
use crate::library::{AddOutcome, LibraryError};
use crate::text::{token_counts, token_set, TokenCounts, TokenSet};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SkillError {
    #[error("malformed rule: {0}")]
    MalformedRule(#[from] ChainError),
}

/// Role a step plays inside a rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRole {
    Condition,
    Diagnostic,
    Finding,
    Action,
    Followup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillStep {
    pub text: String,
    pub role: Option<StepRole>,
}

impl SkillStep {
    pub fn tokens(&self) -> TokenSet {
        token_set(&self.text)
    }
}

/// A normalized procedural rule with its source evidence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillRule {
    pub id: String,
    pub evidence: String,
    pub steps: Vec<SkillStep>,
    /// Deterministic content hash over the steps' normalized text; the
    /// library's dedup key.
    pub normalized_key: String,
    /// Optional source-corpus provenance (e.g. "NICE", "CDC"), stored opaquely.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source: Option<String>,
}

impl SkillRule {
    /// Parses an arrow-chain rule string, assigning step roles by keyword.
    pub fn parse(evidence: &str, rule_text: &str) -> Result<Self, SkillError> {
        let chain = LogicalChain::parse(rule_text)?;
        let steps: Vec<SkillStep> = chain
            .states()
            .iter()
            .enumerate()
            .map(|(i, text)| SkillStep {
                text: text.clone(),
                role: assign_role(text, i == 0),
            })
            .collect();
        let normalized_key = normalized_key(&steps);
        let id = normalized_key[..16].to_string();
        Ok(Self {
            id,
            evidence: evidence.to_string(),
            steps,
            normalized_key,
            source: None,
        })
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    /// The rule rendered back to its arrow-chain form.
    pub fn rule_text(&self) -> String {
        self.steps
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(CANONICAL_ARROW)
    }

    /// Content tokens across all steps, with multiplicity; the document the
    /// library indexes for this rule.
    pub fn step_token_counts(&self) -> TokenCounts {
        let mut counts = TokenCounts::new();
        for step in &self.steps {
            for (token, n) in token_counts(&step.text) {
                *counts.entry(token).or_insert(0) += n;
            }
        }
        counts
    }
}

/// Case/whitespace-insensitive content hash of the step texts.
fn normalized_key(steps: &[SkillStep]) -> String {
    let mut hasher = Sha256::new();
    for step in steps {
        for token in step
            .text
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
        {
            if !token.is_empty() {
                hasher.update(token.as_bytes());
                hasher.update(b" ");
            }
        }
        hasher.update(b"|");
    }
    hex_string(&hasher.finalize())
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn assign_role(text: &str, is_first: bool) -> Option<StepRole> {
    const ACTION: [&str; 3] = ["treatment", "therapy", "administer"];
    const DIAGNOSTIC: [&str; 5] = ["scan", "test", "biopsy", "audiometry", "imaging"];
    const FINDING: [&str; 6] = [
        "detected", "shows", "finding", "loss", "positive", "negative",
    ];
    let lower = text.to_lowercase();
    let tokens = token_set(text);
    let has = |words: &[&str]| words.iter().any(|w| tokens.contains(*w));
    if lower.starts_with("treatment:") || has(&ACTION) {
        Some(StepRole::Action)
    } else if has(&DIAGNOSTIC) {
        Some(StepRole::Diagnostic)
    } else if has(&FINDING) {
        Some(StepRole::Finding)
    } else if lower.contains("follow-up")
        || lower.contains("follow up")
        || tokens.contains("monitor")
    {
        Some(StepRole::Followup)
    } else if is_first {
        Some(StepRole::Condition)
    } else {
        None
    }
}

/// Library of skill rules: build phase accepts inserts (dedup by
/// `normalized_key`), freezing builds the retrieval index and makes the
/// library read-only.
#[derive(Debug, Clone, Default)]
pub struct SkillLibrary {
    rules: Vec<SkillRule>,
    by_key: HashMap<String, usize>,
    by_id: HashMap<String, usize>,
    doc_tokens: Vec<TokenCounts>,
    index: Option<InvertedIndex>,
}

impl SkillLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, rule: SkillRule) -> Result<AddOutcome, LibraryError> {
        if self.is_frozen() {
            return Err(LibraryError::Frozen);
        }
        if let Some(&existing) = self.by_key.get(&rule.normalized_key) {
            return Ok(AddOutcome::Duplicate(self.rules[existing].id.clone()));
        }
        if self.by_id.contains_key(&rule.id) {
            return Ok(AddOutcome::Rejected {
                reason: format!("id {:?} already used by a different rule", rule.id),
            });
        }
        let idx = self.rules.len();
        self.by_key.insert(rule.normalized_key.clone(), idx);
        self.by_id.insert(rule.id.clone(), idx);
        self.doc_tokens.push(rule.step_token_counts());
        self.rules.push(rule);
        Ok(AddOutcome::Added(self.rules[idx].id.clone()))
    }

    /// Builds the inverted index and locks the library. Idempotent.
    pub fn freeze(&mut self) {
        if self.index.is_none() {
            self.index = Some(InvertedIndex::build(self.doc_tokens.iter()));
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.index.is_some()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<&SkillRule> {
        self.rules.get(idx)
    }

    pub fn get_by_id(&self, id: &str) -> Option<&SkillRule> {
        self.by_id.get(id).map(|&i| &self.rules[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &SkillRule> {
        self.rules.iter()
    }

    pub(crate) fn doc_tokens(&self, idx: usize) -> &TokenCounts {
        &self.doc_tokens[idx]
    }

    pub fn index(&self) -> Result<&InvertedIndex, LibraryError> {
        self.index.as_ref().ok_or(LibraryError::NotFrozen)
    }
}
