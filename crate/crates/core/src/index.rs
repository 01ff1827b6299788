//! Inverted token index with Okapi BM25 scoring.
//!
//! Both libraries build one of these at freeze time. Scores use the
//! non-negative IDF variant `ln((N - df + 0.5) / (df + 0.5) + 1)` so tokens
//! that appear in most documents of a tiny corpus cannot push a score below
//! zero; query tokens absent from the corpus contribute 0.

use std::collections::HashMap;

use crate::num::Real;
use crate::text::TokenCounts;

#[derive(Debug, Clone, Default)]
pub struct InvertedIndex {
    postings: HashMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    total_tokens: u64,
}

#[derive(Debug, Clone, Copy)]
struct Posting {
    doc: u32,
    tf: u32,
}

impl InvertedIndex {
    /// Builds the index from per-document token counts, in document order.
    pub fn build<'a, I>(docs: I) -> Self
    where
        I: IntoIterator<Item = &'a TokenCounts>,
    {
        let mut index = Self::default();
        for counts in docs {
            index.push_doc(counts);
        }
        index
    }

    fn push_doc(&mut self, counts: &TokenCounts) {
        let doc = self.doc_lengths.len() as u32;
        let mut length = 0u32;
        for (token, &tf) in counts {
            length += tf;
            self.postings
                .entry(token.clone())
                .or_default()
                .push(Posting { doc, tf });
        }
        self.doc_lengths.push(length);
        self.total_tokens += u64::from(length);
    }

    pub fn doc_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn contains_token(&self, token: &str) -> bool {
        self.postings.contains_key(token)
    }

    pub fn document_frequency(&self, token: &str) -> usize {
        self.postings.get(token).map_or(0, Vec::len)
    }

    fn average_doc_length(&self) -> f64 {
        if self.doc_lengths.is_empty() {
            0.0
        } else {
            self.total_tokens as f64 / self.doc_lengths.len() as f64
        }
    }

    /// BM25 scores for a weighted query against every document.
    ///
    /// Returns one score per document (0 for documents sharing no token with
    /// the query). Query weights multiply each term's contribution.
    pub fn score_all<R: Real>(&self, query: &TokenCounts, k1: f64, b: f64) -> Vec<R> {
        let mut scores = vec![R::zero(); self.doc_lengths.len()];
        if self.doc_lengths.is_empty() {
            return scores;
        }
        let n = R::from_config(self.doc_count() as f64);
        let avgdl = self.average_doc_length();
        if avgdl == 0.0 {
            return scores;
        }
        let avgdl = R::from_config(avgdl);
        let k1 = R::from_config(k1);
        let b = R::from_config(b);
        let half = R::from_config(0.5);
        for (token, &weight) in query {
            let Some(postings) = self.postings.get(token) else {
                continue;
            };
            let df = R::from_config(postings.len() as f64);
            let idf = ((n - df + half) / (df + half) + R::one()).ln();
            let weight = R::from_config(f64::from(weight));
            for posting in postings {
                let tf = R::from_config(f64::from(posting.tf));
                let dl = R::from_config(f64::from(self.doc_lengths[posting.doc as usize]));
                let norm = tf * (k1 + R::one()) / (tf + k1 * (R::one() - b + b * dl / avgdl));
                scores[posting.doc as usize] += weight * idf * norm;
            }
        }
        scores
    }
}

/// Orders document indices by (score desc, tie-break key asc), truncated to
/// `limit`. The tie-break key is usually a stable document id.
pub fn rank_by_score<R: Real, K: Ord>(
    scores: &[R],
    tie_break: impl Fn(usize) -> K,
    limit: usize,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| tie_break(a).cmp(&tie_break(b)))
    });
    order.truncate(limit);
    order
}
