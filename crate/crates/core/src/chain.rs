//! Step-indexed logical chains and their atomic transitions.
//!
//! A chain is an ordered sequence of micro-inference states; each adjacent
//! pair is a transition, the unit of step-level retrieval and verification.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{self, token_set, TokenSet};

/// Canonical separator used when rendering a chain back to text.
pub const CANONICAL_ARROW: &str = " -> ";

/// Jaccard overlap required between an answer and a chain's terminal state
/// for the pair to count as coupled.
pub const QA_COUPLING_THRESHOLD: f64 = 0.25;

/// Built-in transition type labels. Labels are free-form and carried on
/// transitions without affecting any scoring.
pub const LABEL_PREMISE_TO_INTERMEDIATE: &str = "premise->intermediate";
pub const LABEL_INTERMEDIATE_TO_CONCLUSION: &str = "intermediate->conclusion";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainError {
    #[error("chain needs at least 2 states, found {found}")]
    NoTransitions { found: usize },
    #[error("state {index} is empty after normalization")]
    EmptyState { index: usize },
    #[error("states {index} and {} are identical after normalization", index + 1)]
    DuplicateAdjacent { index: usize },
    #[error("state {index} contains an arrow separator")]
    ArrowInState { index: usize },
    #[error("context is empty")]
    EmptyContext,
}

/// An ordered sequence of reasoning states, at least two, none empty, no
/// adjacent repeats. States are stored in normalized form (NFC, trimmed,
/// whitespace collapsed).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LogicalChain {
    states: Vec<String>,
}

impl LogicalChain {
    /// Builds a chain from raw state texts, normalizing and validating.
    pub fn new<I, S>(states: I) -> Result<Self, ChainError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let normalized: Vec<String> = states
            .into_iter()
            .map(|s| text::normalize_text(s.as_ref()))
            .collect();
        if normalized.len() < 2 {
            return Err(ChainError::NoTransitions {
                found: normalized.len(),
            });
        }
        for (i, state) in normalized.iter().enumerate() {
            if state.is_empty() {
                return Err(ChainError::EmptyState { index: i + 1 });
            }
            // state texts must survive the canonical text rendering; an
            // embedded arrow would split into extra states on reparse
            if ARROWS.iter().any(|arrow| state.contains(arrow)) {
                return Err(ChainError::ArrowInState { index: i + 1 });
            }
        }
        for (i, pair) in normalized.windows(2).enumerate() {
            if pair[0] == pair[1] {
                return Err(ChainError::DuplicateAdjacent { index: i + 1 });
            }
        }
        Ok(Self { states: normalized })
    }

    /// Parses a chain string, splitting on any accepted arrow form
    /// ("->", "-->", "=>", "→") after NFC normalization.
    pub fn parse(input: &str) -> Result<Self, ChainError> {
        Self::new(split_arrows(&text::normalize_text(input)))
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    /// Number of states T.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: T >= 2
    }

    pub fn terminal(&self) -> &str {
        self.states.last().expect("chain has at least 2 states")
    }

    /// The T-1 transitions in state order. Transition `index` is 1-based.
    pub fn transitions(&self) -> Vec<Transition> {
        self.states
            .windows(2)
            .enumerate()
            .map(|(i, pair)| Transition {
                head: pair[0].clone(),
                tail: pair[1].clone(),
                index: i + 1,
                label: None,
            })
            .collect()
    }

    /// Renders the chain with the canonical " -> " separator.
    /// `LogicalChain::parse` inverts this exactly.
    pub fn to_text(&self) -> String {
        self.states.join(CANONICAL_ARROW)
    }
}

/// Serde helper: accepts a chain as an arrow string or an array of states.
pub fn deserialize_flexible<'de, D>(deserializer: D) -> Result<LogicalChain, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flexible {
        Text(String),
        States(Vec<String>),
    }
    let chain = match Flexible::deserialize(deserializer)? {
        Flexible::Text(text) => LogicalChain::parse(&text),
        Flexible::States(states) => LogicalChain::new(states),
    };
    chain.map_err(serde::de::Error::custom)
}

/// Optional-field variant of [`deserialize_flexible`].
pub fn deserialize_flexible_opt<'de, D>(deserializer: D) -> Result<Option<LogicalChain>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    struct Wrapper(#[serde(deserialize_with = "deserialize_flexible")] LogicalChain);
    Ok(Option::<Wrapper>::deserialize(deserializer)?.map(|w| w.0))
}

impl TryFrom<Vec<String>> for LogicalChain {
    type Error = ChainError;
    fn try_from(states: Vec<String>) -> Result<Self, ChainError> {
        Self::new(states)
    }
}

impl From<LogicalChain> for Vec<String> {
    fn from(chain: LogicalChain) -> Vec<String> {
        chain.states
    }
}

const ARROWS: [&str; 4] = ["-->", "->", "=>", "→"];

fn split_arrows(input: &str) -> Vec<String> {
    let mut segments = Vec::new();
    let mut current = String::new();
    let mut rest = input;
    'outer: while !rest.is_empty() {
        for arrow in ARROWS {
            if let Some(after) = rest.strip_prefix(arrow) {
                segments.push(std::mem::take(&mut current));
                rest = after;
                continue 'outer;
            }
        }
        let ch = rest.chars().next().expect("non-empty rest");
        current.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    segments.push(current);
    segments
}

/// One adjacent state pair z_t -> z_{t+1}; `index` is the 1-based position t.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub head: String,
    pub tail: String,
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<String>,
}

impl Transition {
    /// Standalone transition for queries, independent of any chain.
    pub fn new(head: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: text::normalize_text(&head.into()),
            tail: text::normalize_text(&tail.into()),
            index: 1,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn head_tokens(&self) -> TokenSet {
        token_set(&self.head)
    }

    pub fn tail_tokens(&self) -> TokenSet {
        token_set(&self.tail)
    }
}

/// Result of checking that chain states stay grounded in a context document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub grounded: bool,
    /// (1-based state index, state content tokens missing from the context).
    pub violations: Vec<(usize, TokenSet)>,
    /// Content tokens extracted from the context.
    pub extracted_entities: TokenSet,
}

/// Checks each state against the context's content tokens using the default
/// extractor. A state passes if at least one of its content tokens occurs in
/// the context; states with no content tokens pass vacuously.
pub fn entity_grounding(
    chain: &LogicalChain,
    context: &str,
) -> Result<GroundingReport, ChainError> {
    entity_grounding_with(chain, context, token_set)
}

/// Same as [`entity_grounding`] with a caller-supplied entity extractor.
pub fn entity_grounding_with<F>(
    chain: &LogicalChain,
    context: &str,
    extractor: F,
) -> Result<GroundingReport, ChainError>
where
    F: Fn(&str) -> TokenSet,
{
    if context.trim().is_empty() {
        return Err(ChainError::EmptyContext);
    }
    let entities = extractor(context);
    let mut violations = Vec::new();
    for (i, state) in chain.states().iter().enumerate() {
        let tokens = extractor(state);
        if tokens.is_empty() {
            continue;
        }
        if tokens.iter().all(|t| !entities.contains(t)) {
            let missing: TokenSet = tokens.difference(&entities).cloned().collect();
            violations.push((i + 1, missing));
        }
    }
    Ok(GroundingReport {
        grounded: violations.is_empty(),
        violations,
        extracted_entities: entities,
    })
}

/// Whether an answer is coupled to the chain's terminal state, plus the
/// overlap score behind the verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub coupled: bool,
    pub overlap: f64,
}

/// An answer couples to a chain when its content tokens overlap the terminal
/// state's tokens with Jaccard >= [`QA_COUPLING_THRESHOLD`].
pub fn check_qa_coupling(chain: &LogicalChain, answer: &str) -> CouplingReport {
    let overlap: f64 = text::jaccard(&token_set(answer), &token_set(chain.terminal()));
    CouplingReport {
        coupled: overlap >= QA_COUPLING_THRESHOLD,
        overlap,
    }
}
