//! Trainable feature-linear reranker for the second retrieval stage.
//!
//! `Sim(q, d)` is a dot product between learned weights and a fixed feature
//! vector. Training minimizes the contrastive loss
//! `-log(exp(sim+) / (exp(sim+) + sum_i exp(sim-_i)))` over (query, positive,
//! negatives) triplets by full-batch gradient descent with an analytic
//! gradient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::InvertedIndex;
use crate::num::{log_sum_exp, Real};
use crate::text::{jaccard, token_counts, TokenCounts, TokenSet};

/// Fixed, ordered feature set:
/// `[bm25, jaccard, query coverage, doc coverage, clipped |q|/|d|, bias]`.
pub const FEATURE_COUNT: usize = 6;

/// Bumped whenever the feature definitions change; persisted weights carry it.
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RerankError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("triplet {index} has no negatives")]
    MissingNegatives { index: usize },
    #[error("unsupported feature version {found}, expected {expected}")]
    FeatureVersionMismatch { found: u32, expected: u32 },
    #[error("expected {FEATURE_COUNT} weights, found {found}")]
    BadWeightCount { found: usize },
}

/// Feature vector for a (query, document) pair. The BM25 component comes
/// from whichever index the caller scored the document against.
pub fn features<R: Real>(query: &TokenCounts, doc: &TokenCounts, bm25: R) -> [R; FEATURE_COUNT] {
    let query_set: TokenSet = query.keys().cloned().collect();
    let doc_set: TokenSet = doc.keys().cloned().collect();
    let shared = query_set.intersection(&doc_set).count() as f64;
    let query_len: u32 = query.values().sum();
    let doc_len: u32 = doc.values().sum();
    let query_coverage = if query_set.is_empty() {
        0.0
    } else {
        shared / query_set.len() as f64
    };
    let doc_coverage = if doc_set.is_empty() {
        0.0
    } else {
        shared / doc_set.len() as f64
    };
    let length_ratio = if doc_len == 0 {
        1.0
    } else {
        (f64::from(query_len) / f64::from(doc_len)).min(1.0)
    };
    [
        bm25,
        jaccard(&query_set, &doc_set),
        R::from_config(query_coverage),
        R::from_config(doc_coverage),
        R::from_config(length_ratio),
        R::one(),
    ]
}

/// Learned reranker weights over the fixed feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankerParams<R: Real> {
    weights: [R; FEATURE_COUNT],
    trained: bool,
}

impl<R: Real> Default for RerankerParams<R> {
    fn default() -> Self {
        Self {
            weights: [R::zero(); FEATURE_COUNT],
            trained: false,
        }
    }
}

impl<R: Real> RerankerParams<R> {
    pub fn from_weights(weights: [R; FEATURE_COUNT]) -> Self {
        Self {
            weights,
            trained: true,
        }
    }

    pub fn weights(&self) -> &[R; FEATURE_COUNT] {
        &self.weights
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn score(&self, features: &[R; FEATURE_COUNT]) -> R {
        self.weights
            .iter()
            .zip(features.iter())
            .map(|(&w, &f)| w * f)
            .sum()
    }
}

/// Serialized form: `{"weights": [...], "feature_version": 1}`.
#[derive(Debug, Serialize, Deserialize)]
struct RerankerDoc {
    weights: Vec<f64>,
    feature_version: u32,
}

impl RerankerParams<f64> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RerankerDoc {
            weights: self.weights.to_vec(),
            feature_version: FEATURE_VERSION,
        })
        .expect("reranker params serialize")
    }

    pub fn from_json(json: &str) -> Result<Self, RerankError> {
        let doc: RerankerDoc =
            serde_json::from_str(json).map_err(|_| RerankError::BadWeightCount { found: 0 })?;
        if doc.feature_version != FEATURE_VERSION {
            return Err(RerankError::FeatureVersionMismatch {
                found: doc.feature_version,
                expected: FEATURE_VERSION,
            });
        }
        let weights: [f64; FEATURE_COUNT] =
            doc.weights
                .as_slice()
                .try_into()
                .map_err(|_| RerankError::BadWeightCount {
                    found: doc.weights.len(),
                })?;
        Ok(Self::from_weights(weights))
    }
}

/// Contrastive loss for one (positive, negatives) group, stabilized via
/// max-subtraction inside log-sum-exp. Always >= 0; 0 only in the
/// infinite-margin limit.
pub fn contrastive_loss<R: Real>(sim_pos: R, sim_negs: &[R]) -> R {
    let mut all = Vec::with_capacity(sim_negs.len() + 1);
    all.push(sim_pos);
    all.extend_from_slice(sim_negs);
    log_sum_exp(&all) - sim_pos
}

/// One training example: a query, its gold document, and hard negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingTriplet {
    pub query: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

/// Precomputed per-triplet feature vectors.
#[derive(Debug, Clone)]
pub struct TripletFeatures<R: Real> {
    pub positive: [R; FEATURE_COUNT],
    pub negatives: Vec<[R; FEATURE_COUNT]>,
}

/// Featurizes triplets against a BM25 index built over all documents that
/// appear in the training set.
pub fn featurize_triplets<R: Real>(
    triplets: &[TrainingTriplet],
    bm25_k1: f64,
    bm25_b: f64,
) -> Result<Vec<TripletFeatures<R>>, RerankError> {
    if triplets.is_empty() {
        return Err(RerankError::EmptyTrainingSet);
    }
    for (i, t) in triplets.iter().enumerate() {
        if t.negatives.is_empty() {
            return Err(RerankError::MissingNegatives { index: i });
        }
    }
    let mut docs: Vec<TokenCounts> = Vec::new();
    for t in triplets {
        docs.push(token_counts(&t.positive));
        docs.extend(t.negatives.iter().map(|n| token_counts(n)));
    }
    let index = InvertedIndex::build(docs.iter());
    let mut out = Vec::with_capacity(triplets.len());
    let mut doc_cursor = 0usize;
    for t in triplets {
        let query = token_counts(&t.query);
        let scores: Vec<R> = index.score_all(&query, bm25_k1, bm25_b);
        let positive = features(&query, &docs[doc_cursor], scores[doc_cursor]);
        let mut negatives = Vec::with_capacity(t.negatives.len());
        for j in 0..t.negatives.len() {
            let idx = doc_cursor + 1 + j;
            negatives.push(features(&query, &docs[idx], scores[idx]));
        }
        doc_cursor += 1 + t.negatives.len();
        out.push(TripletFeatures {
            positive,
            negatives,
        });
    }
    Ok(out)
}

/// Mean contrastive loss of `weights` over featurized triplets.
pub fn mean_contrastive_loss<R: Real>(
    weights: &[R; FEATURE_COUNT],
    triplets: &[TripletFeatures<R>],
) -> R {
    let dot =
        |f: &[R; FEATURE_COUNT]| -> R { weights.iter().zip(f.iter()).map(|(&w, &x)| w * x).sum() };
    let total: R = triplets
        .iter()
        .map(|t| {
            let negs: Vec<R> = t.negatives.iter().map(&dot).collect();
            contrastive_loss(dot(&t.positive), &negs)
        })
        .sum();
    total / R::from_config(triplets.len() as f64)
}

/// Mean loss and its analytic gradient with respect to the weights.
///
/// Per triplet the gradient is `sum_c softmax(sims)_c * f_c - f_pos` over the
/// candidate set {positive} + negatives.
pub fn loss_gradient<R: Real>(
    weights: &[R; FEATURE_COUNT],
    triplets: &[TripletFeatures<R>],
) -> (R, [R; FEATURE_COUNT]) {
    let dot =
        |f: &[R; FEATURE_COUNT]| -> R { weights.iter().zip(f.iter()).map(|(&w, &x)| w * x).sum() };
    let mut grad = [R::zero(); FEATURE_COUNT];
    let mut total_loss = R::zero();
    for t in triplets {
        let sim_pos = dot(&t.positive);
        let mut sims = vec![sim_pos];
        sims.extend(t.negatives.iter().map(&dot));
        let lse = log_sum_exp(&sims);
        total_loss += lse - sim_pos;
        // softmax over candidates; candidate 0 is the positive
        for (c, sim) in sims.iter().enumerate() {
            let p = (*sim - lse).exp();
            let f = if c == 0 {
                &t.positive
            } else {
                &t.negatives[c - 1]
            };
            for (g, &x) in grad.iter_mut().zip(f.iter()) {
                *g += p * x;
            }
        }
        for (g, &x) in grad.iter_mut().zip(t.positive.iter()) {
            *g -= x;
        }
    }
    let scale = R::from_config(triplets.len() as f64);
    for g in grad.iter_mut() {
        *g /= scale;
    }
    (total_loss / scale, grad)
}

/// Training output: final params plus the per-epoch loss trace.
#[derive(Debug, Clone)]
pub struct TrainingReport<R: Real> {
    pub params: RerankerParams<R>,
    pub initial_loss: R,
    pub final_loss: R,
    pub epoch_losses: Vec<R>,
}

/// Trains reranker weights by full-batch gradient descent from zero
/// initialization. Training is deterministic; `seed` is accepted for
/// interface stability and reserved for stochastic variants.
pub fn train_reranker<R: Real>(
    triplets: &[TrainingTriplet],
    epochs: usize,
    learning_rate: f64,
    _seed: u64,
) -> Result<TrainingReport<R>, RerankError> {
    let feats = featurize_triplets::<R>(triplets, 1.2, 0.75)?;
    let lr = R::from_config(learning_rate);
    let mut weights = [R::zero(); FEATURE_COUNT];
    let initial_loss = mean_contrastive_loss(&weights, &feats);
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (loss, grad) = loss_gradient(&weights, &feats);
        epoch_losses.push(loss);
        for (w, g) in weights.iter_mut().zip(grad.iter()) {
            *w -= lr * *g;
        }
    }
    let final_loss = mean_contrastive_loss(&weights, &feats);
    Ok(TrainingReport {
        params: RerankerParams::from_weights(weights),
        initial_loss,
        final_loss,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_candidates_give_log_n_plus_one() {
        let loss: f64 = contrastive_loss(0.7, &[0.7, 0.7, 0.7]);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn dominant_positive_drives_loss_to_zero() {
        let loss: f64 = contrastive_loss(60.0, &[0.0, 1.0]);
        assert!(loss >= 0.0);
        assert!(loss < 1e-20);
    }

    #[test]
    fn hand_computed_loss_value() {
        let loss: f64 = contrastive_loss(1.0, &[0.0, 0.0]);
        let expected = (1.0 + 2.0 * (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.551445).abs() < 1e-6);
    }

    #[test]
    fn loss_is_nonnegative_and_stable_for_extreme_sims() {
        for (pos, negs) in [
            (1e6, vec![1e6 - 1.0]),
            (-1e6, vec![1e6]),
            (0.0, vec![-1e6, 1e6]),
        ] {
            let loss: f64 = contrastive_loss(pos, &negs);
            assert!(loss.is_finite());
            assert!(loss >= 0.0);
        }
    }

    fn toy_triplets() -> Vec<TrainingTriplet> {
        vec![
            TrainingTriplet {
                query: "alpha beta gamma".into(),
                positive: "alpha beta gamma".into(),
                negatives: vec!["delta epsilon".into(), "zeta eta theta iota".into()],
            },
            TrainingTriplet {
                query: "kappa lambda".into(),
                positive: "kappa lambda mu".into(),
                negatives: vec!["nu xi omicron pi rho".into()],
            },
            TrainingTriplet {
                query: "sigma tau".into(),
                positive: "sigma tau upsilon".into(),
                negatives: vec!["phi chi".into(), "psi omega alpha".into()],
            },
        ]
    }

    #[test]
    fn zero_weights_start_at_uniform_loss() {
        let triplets = toy_triplets();
        let feats = featurize_triplets::<f64>(&triplets, 1.2, 0.75).unwrap();
        let loss = mean_contrastive_loss(&[0.0; FEATURE_COUNT], &feats);
        let expected: f64 = triplets
            .iter()
            .map(|t| ((1 + t.negatives.len()) as f64).ln())
            .sum::<f64>()
            / triplets.len() as f64;
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let feats = featurize_triplets::<f64>(&toy_triplets(), 1.2, 0.75).unwrap();
        let weights = [0.3, -0.2, 0.5, 0.1, -0.4, 0.05];
        let (_, grad) = loss_gradient(&weights, &feats);
        let h = 1e-5;
        for dim in 0..FEATURE_COUNT {
            let mut plus = weights;
            plus[dim] += h;
            let mut minus = weights;
            minus[dim] -= h;
            let fd = (mean_contrastive_loss(&plus, &feats) - mean_contrastive_loss(&minus, &feats))
                / (2.0 * h);
            let diff = (grad[dim] - fd).abs();
            // absolute floor for vanishing entries (e.g. the bias gradient is
            // exactly zero and finite differences only see rounding noise)
            let ok = diff <= 1e-9 || diff / grad[dim].abs().max(fd.abs()) <= 1e-4;
            assert!(ok, "dim {dim}: analytic {} vs fd {fd}", grad[dim]);
        }
    }

    #[test]
    fn training_separates_separable_triplets() {
        let triplets = toy_triplets();
        let report = train_reranker::<f64>(&triplets, 200, 0.5, 0).unwrap();
        assert!(report.final_loss < report.initial_loss);
        // positive ranked first on every training triplet
        let feats = featurize_triplets::<f64>(&triplets, 1.2, 0.75).unwrap();
        for t in &feats {
            let pos = report.params.score(&t.positive);
            for neg in &t.negatives {
                assert!(pos > report.params.score(neg));
            }
        }
    }

    #[test]
    fn training_loss_is_non_increasing_at_modest_lr() {
        let report = train_reranker::<f64>(&toy_triplets(), 50, 0.1, 0).unwrap();
        for pair in report.epoch_losses.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn rejects_empty_or_negative_free_training_sets() {
        assert_eq!(
            train_reranker::<f64>(&[], 10, 0.1, 0).unwrap_err(),
            RerankError::EmptyTrainingSet
        );
        let bad = vec![TrainingTriplet {
            query: "q".into(),
            positive: "p".into(),
            negatives: vec![],
        }];
        assert_eq!(
            train_reranker::<f64>(&bad, 10, 0.1, 0).unwrap_err(),
            RerankError::MissingNegatives { index: 0 }
        );
    }

    #[test]
    fn params_round_trip_through_json() {
        let params = RerankerParams::from_weights([0.1, -0.25, 0.5, 0.0, 1.5, -3.75]);
        let json = params.to_json();
        let back = RerankerParams::from_json(&json).unwrap();
        assert_eq!(back, params);
        assert!(back.is_trained());
        assert!(json.contains("\"feature_version\": 1"));
    }

    #[test]
    fn version_mismatch_is_loud() {
        let err =
            RerankerParams::from_json(r#"{"weights": [0, 0, 0, 0, 0, 0], "feature_version": 99}"#)
                .unwrap_err();
        assert_eq!(
            err,
            RerankError::FeatureVersionMismatch {
                found: 99,
                expected: FEATURE_VERSION
            }
        );
    }

    #[test]
    fn training_works_at_f32_too() {
        let report = train_reranker::<f32>(&toy_triplets(), 50, 0.2, 0).unwrap();
        assert!(report.final_loss < report.initial_loss);
    }
}
