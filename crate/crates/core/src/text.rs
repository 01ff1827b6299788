//! Shared word tokenizer and token-set overlap.
//!
//! Every module that compares texts (grounding, retrieval, alignment,
//! metrics) goes through this tokenizer so scores agree across the crate:
//! NFC normalization, lowercasing, splitting on non-alphanumeric runs, and a
//! fixed stopword list.

use std::collections::{BTreeMap, BTreeSet};

use unicode_normalization::UnicodeNormalization;

use crate::num::Real;

/// Stopwords dropped by the content tokenizer.
///
/// Deliberately excludes single-letter words: fixtures and chain notation
/// use bare state names like "A" that must survive tokenization.
pub const STOPWORDS: [&str; 30] = [
    "the", "of", "to", "in", "on", "at", "by", "for", "with", "and", "or", "is", "are", "was",
    "were", "be", "been", "being", "this", "that", "these", "those", "it", "its", "as", "from",
    "into", "which", "such", "their",
];

/// Distinct content tokens of a text.
pub type TokenSet = BTreeSet<String>;

/// Content tokens with multiplicity (token -> count).
pub type TokenCounts = BTreeMap<String, u32>;

fn is_stopword(token: &str) -> bool {
    STOPWORDS.contains(&token)
}

/// Canonical form for state and step texts: NFC, trimmed, internal
/// whitespace runs collapsed to single spaces.
pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Content tokens in order of appearance: NFC, lowercase, split on
/// non-alphanumeric runs, stopwords removed.
pub fn tokenize(text: &str) -> Vec<String> {
    let nfc: String = text.nfc().collect();
    nfc.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty() && !is_stopword(t))
        .map(str::to_string)
        .collect()
}

pub fn token_set(text: &str) -> TokenSet {
    tokenize(text).into_iter().collect()
}

pub fn token_counts(text: &str) -> TokenCounts {
    let mut counts = TokenCounts::new();
    for token in tokenize(text) {
        *counts.entry(token).or_insert(0) += 1;
    }
    counts
}

/// Number of whitespace-separated tokens, used for token accounting.
pub fn whitespace_token_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Jaccard overlap of two token sets.
///
/// Two empty sets count as identical (1.0); one empty set overlaps nothing.
pub fn jaccard<R: Real>(a: &TokenSet, b: &TokenSet) -> R {
    if a.is_empty() && b.is_empty() {
        return R::one();
    }
    if a.is_empty() || b.is_empty() {
        return R::zero();
    }
    let intersection = a.intersection(b).count();
    let union = a.len() + b.len() - intersection;
    R::from_config(intersection as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_lowercases_and_splits_on_punctuation() {
        assert_eq!(
            tokenize("Cisplatin binds DNA, induces cross-linking."),
            vec!["cisplatin", "binds", "dna", "induces", "cross", "linking"]
        );
    }

    #[test]
    fn tokenize_drops_stopwords_but_keeps_single_letters() {
        assert_eq!(tokenize("A and B are related"), vec!["a", "b", "related"]);
        assert_eq!(tokenize("the of to"), Vec::<String>::new());
    }

    #[test]
    fn stopword_list_has_exactly_thirty_entries() {
        let distinct: TokenSet = STOPWORDS.iter().map(|s| s.to_string()).collect();
        assert_eq!(distinct.len(), 30);
    }

    #[test]
    fn normalize_collapses_whitespace() {
        assert_eq!(
            normalize_text("  DNA   cross  linking "),
            "DNA cross linking"
        );
    }

    #[test]
    fn jaccard_basic_values() {
        let a = token_set("dna cross linking");
        let b = token_set("dna crosslinking");
        // {dna} over {dna, cross, linking, crosslinking}
        assert!((jaccard::<f64>(&a, &b) - 0.25).abs() < 1e-12);
        assert_eq!(jaccard::<f64>(&a, &a), 1.0);
        assert_eq!(jaccard::<f64>(&a, &token_set("renal panel")), 0.0);
    }

    #[test]
    fn jaccard_empty_conventions() {
        let empty = TokenSet::new();
        let full = token_set("a b");
        assert_eq!(jaccard::<f64>(&empty, &empty), 1.0);
        assert_eq!(jaccard::<f64>(&empty, &full), 0.0);
        assert_eq!(jaccard::<f32>(&full, &empty), 0.0);
    }

    #[test]
    fn token_counts_tracks_multiplicity() {
        let counts = token_counts("dna dna cross");
        assert_eq!(counts.get("dna"), Some(&2));
        assert_eq!(counts.get("cross"), Some(&1));
    }

    #[test]
    fn whitespace_count_is_plain_split() {
        assert_eq!(whitespace_token_count("a b  c\nd"), 4);
        assert_eq!(whitespace_token_count(""), 0);
    }
}
