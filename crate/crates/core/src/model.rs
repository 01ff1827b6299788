//! Adaptable generative chain model and the test-time adaptation loop.
//!
//! The built-in model is a first-order transition table over the state
//! vocabulary: a V x V logit matrix whose row softmax gives the next-state
//! distribution. It is small enough that the chain log-likelihood, its
//! gradient, and greedy decoding are all exactly checkable, while keeping
//! the adapt-then-sample structure a real language model would plug into
//! (see [`AdaptableModel`]).

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::LogicalChain;
use crate::experience::{ExperienceItem, ExperienceLibrary};
use crate::num::{log_sum_exp, Real};
use crate::text::token_set;

/// Reserved end-of-chain symbol; chains are scored against an explicit stop
/// so probabilities normalize over variable-length chains.
pub const END_SYMBOL: &str = "<END>";
/// Reserved symbol that absorbs states outside the vocabulary. Never emitted
/// during decoding.
pub const UNK_SYMBOL: &str = "<UNK>";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("experience library is empty; cannot build a vocabulary")]
    EmptyLibrary,
    #[error("adaptation batch is empty")]
    EmptyBatch,
    #[error("no question token matches any vocabulary state and no fallback is configured")]
    NoAnchor,
    #[error("decode emitted {emitted} state(s); a chain needs at least 2")]
    DegenerateChain { emitted: usize },
    #[error("invalid adaptation config: {0}")]
    InvalidConfig(String),
    #[error("bad model snapshot: {0}")]
    Snapshot(String),
    #[error("remote model error: {0}")]
    Remote(String),
}

/// Ordered state vocabulary with the two reserved symbols at the end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    states: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from distinct state strings (sorted), appending
    /// the reserved END and UNK symbols.
    pub fn from_states<I, S>(states: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut distinct: Vec<String> = states
            .into_iter()
            .map(Into::into)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        distinct.push(END_SYMBOL.to_string());
        distinct.push(UNK_SYMBOL.to_string());
        let lookup = distinct
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self {
            states: distinct,
            lookup,
        }
    }

    pub fn size(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn state(&self, index: usize) -> &str {
        &self.states[index]
    }

    pub fn end_index(&self) -> usize {
        self.states.len() - 2
    }

    pub fn unk_index(&self) -> usize {
        self.states.len() - 1
    }

    /// Index of a state, mapping unseen states to UNK.
    pub fn index_of(&self, state: &str) -> usize {
        self.lookup
            .get(state)
            .copied()
            .unwrap_or_else(|| self.unk_index())
    }
}

/// All distinct normalized state strings across the library's chains,
/// sorted, plus the reserved symbols.
pub fn build_vocab(library: &ExperienceLibrary) -> Result<Vocab, ModelError> {
    if library.is_empty() {
        return Err(ModelError::EmptyLibrary);
    }
    Ok(Vocab::from_states(
        library
            .items()
            .flat_map(|item| item.chain.states().iter().cloned()),
    ))
}

/// One (question, context, chain) example the model adapts on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub question: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub context: Option<String>,
    pub chain: LogicalChain,
}

impl From<&ExperienceItem> for TraceSample {
    fn from(item: &ExperienceItem) -> Self {
        Self {
            question: item.question.clone(),
            context: item.context.clone(),
            chain: item.chain.clone(),
        }
    }
}

/// Test-time adaptation knobs: gradient steps, learning rate, decode cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Gradient-descent steps n.
    pub steps: usize,
    /// Learning rate eta.
    pub eta: f64,
    /// Maximum number of states a decoded chain may contain.
    pub max_states: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            eta: 0.1,
            max_states: 12,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.eta <= 0.0 {
            return Err(ModelError::InvalidConfig(format!(
                "eta must be > 0, got {}",
                self.eta
            )));
        }
        if self.max_states < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "max_states must be >= 2, got {}",
                self.max_states
            )));
        }
        Ok(())
    }
}

/// Transition-table model parameters: a V x V row-major logit matrix plus
/// the anchoring policy that picks a decode start state from the question.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<R: Real> {
    vocab: Vocab,
    logits: Vec<R>,
    anchor_fallback: Option<usize>,
}

/// Adaptation output: query-local parameters plus the loss measured before
/// each gradient step.
#[derive(Debug, Clone)]
pub struct Adapted<R: Real> {
    pub params: ModelParams<R>,
    pub loss_trace: Vec<R>,
}

impl<R: Real> ModelParams<R> {
    /// Zero-initialized logits (uniform next-state distribution) with no
    /// anchor fallback.
    pub fn uniform(vocab: Vocab) -> Self {
        let v = vocab.size();
        Self {
            vocab,
            logits: vec![R::zero(); v * v],
            anchor_fallback: None,
        }
    }

    /// Builds the vocabulary from the library and sets the anchor fallback
    /// to the most frequent initial state (ties to the vocab-order first).
    pub fn from_library(library: &ExperienceLibrary) -> Result<Self, ModelError> {
        let vocab = build_vocab(library)?;
        let mut params = Self::uniform(vocab);
        params.anchor_fallback = most_frequent_initial_state(library, &params.vocab);
        Ok(params)
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn logits(&self) -> &[R] {
        &self.logits
    }

    pub fn logit(&self, row: usize, col: usize) -> R {
        self.logits[row * self.vocab.size() + col]
    }

    pub fn set_logit(&mut self, row: usize, col: usize, value: R) {
        self.logits[row * self.vocab.size() + col] = value;
    }

    pub fn anchor_fallback(&self) -> Option<usize> {
        self.anchor_fallback
    }

    pub fn set_anchor_fallback(&mut self, fallback: Option<usize>) {
        self.anchor_fallback = fallback;
    }

    /// Recomputes the anchor fallback from library statistics. Snapshots do
    /// not carry the fallback, so loaders call this after restoring.
    pub fn refresh_anchor_fallback(&mut self, library: &ExperienceLibrary) {
        self.anchor_fallback = most_frequent_initial_state(library, &self.vocab);
    }

    fn row(&self, row: usize) -> &[R] {
        let v = self.vocab.size();
        &self.logits[row * v..(row + 1) * v]
    }

    /// Row softmax; sums to 1 within numeric precision.
    pub fn row_softmax(&self, row: usize) -> Vec<R> {
        let logits = self.row(row);
        let lse = log_sum_exp(logits);
        logits.iter().map(|&l| (l - lse).exp()).collect()
    }

    fn row_log_softmax(&self, row: usize) -> Vec<R> {
        let logits = self.row(row);
        let lse = log_sum_exp(logits);
        logits.iter().map(|&l| l - lse).collect()
    }

    /// log p(chain): sum of transition log-probabilities plus the terminal
    /// END step. Question conditioning enters only through the anchor choice
    /// at decode time, so the likelihood itself depends on the chain alone.
    pub fn log_prob(&self, chain: &LogicalChain) -> R {
        let states = chain.states();
        let mut total = R::zero();
        for pair in states.windows(2) {
            let row = self.vocab.index_of(&pair[0]);
            let col = self.vocab.index_of(&pair[1]);
            total += self.row_log_softmax(row)[col];
        }
        let last = self.vocab.index_of(states.last().expect("T >= 2"));
        total += self.row_log_softmax(last)[self.vocab.end_index()];
        total
    }

    /// Mean negative log-likelihood of the batch's chains.
    pub fn batch_nll(&self, batch: &[TraceSample]) -> Result<R, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let total: R = batch.iter().map(|s| -self.log_prob(&s.chain)).sum();
        Ok(total / R::from_config(batch.len() as f64))
    }

    /// Analytic gradient of the batch mean NLL with respect to the logits:
    /// softmax(row) minus the one-hot of the observed next state, accumulated
    /// per visited row and scaled by 1/m. Rows no chain visits stay zero.
    pub fn nll_gradient(&self, batch: &[TraceSample]) -> Result<Vec<R>, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let v = self.vocab.size();
        let mut grad = vec![R::zero(); v * v];
        for sample in batch {
            let states = sample.chain.states();
            let mut visit = |row: usize, observed: usize| {
                let soft = self.row_softmax(row);
                for (c, &p) in soft.iter().enumerate() {
                    grad[row * v + c] += p;
                }
                grad[row * v + observed] -= R::one();
            };
            for pair in states.windows(2) {
                visit(self.vocab.index_of(&pair[0]), self.vocab.index_of(&pair[1]));
            }
            visit(
                self.vocab.index_of(states.last().expect("T >= 2")),
                self.vocab.end_index(),
            );
        }
        let scale = R::from_config(batch.len() as f64);
        for g in grad.iter_mut() {
            *g /= scale;
        }
        Ok(grad)
    }

    /// Runs `config.steps` full-batch gradient-descent steps at rate
    /// `config.eta`, returning query-adapted parameters and the loss measured
    /// before each step. The base parameters are not modified. With zero
    /// steps the result is a bitwise copy and the trace is empty.
    pub fn tta_adapt(
        &self,
        batch: &[TraceSample],
        config: &AdaptConfig,
    ) -> Result<Adapted<R>, ModelError> {
        config.validate()?;
        if config.steps >= 1 && batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let mut adapted = self.clone();
        let mut loss_trace = Vec::with_capacity(config.steps);
        let eta = R::from_config(config.eta);
        for _ in 0..config.steps {
            loss_trace.push(adapted.batch_nll(batch)?);
            let grad = adapted.nll_gradient(batch)?;
            for (l, g) in adapted.logits.iter_mut().zip(grad.iter()) {
                *l -= eta * *g;
            }
        }
        Ok(Adapted {
            params: adapted,
            loss_trace,
        })
    }

    /// Picks the decode start state: the vocabulary state sharing the most
    /// content tokens with question+context (ties to vocab order), falling
    /// back to the configured most-frequent initial state.
    pub fn anchor_state(&self, question: &str, context: Option<&str>) -> Result<usize, ModelError> {
        let mut query = token_set(question);
        if let Some(ctx) = context {
            query.extend(token_set(ctx));
        }
        let mut best: Option<(usize, usize)> = None; // (overlap, index)
        for idx in 0..self.vocab.end_index() {
            let overlap = token_set(self.vocab.state(idx))
                .intersection(&query)
                .count();
            if overlap > 0 && best.is_none_or(|(b, _)| overlap > b) {
                best = Some((overlap, idx));
            }
        }
        best.map(|(_, idx)| idx)
            .or(self.anchor_fallback)
            .ok_or(ModelError::NoAnchor)
    }

    /// Deterministic greedy decode from the anchored start state. Each step
    /// takes the argmax of the current row (ties to vocab order, UNK never
    /// emitted) and stops on END, on revisiting a state, or at
    /// `config.max_states`.
    pub fn sample_chain(
        &self,
        question: &str,
        context: Option<&str>,
        config: &AdaptConfig,
    ) -> Result<LogicalChain, ModelError> {
        config.validate()?;
        let start = self.anchor_state(question, context)?;
        let mut visited: HashSet<usize> = HashSet::from([start]);
        let mut states = vec![self.vocab.state(start).to_string()];
        let mut current = start;
        while states.len() < config.max_states {
            let next = self.argmax_next(current);
            if next == self.vocab.end_index() || !visited.insert(next) {
                break;
            }
            states.push(self.vocab.state(next).to_string());
            current = next;
        }
        if states.len() < 2 {
            return Err(ModelError::DegenerateChain {
                emitted: states.len(),
            });
        }
        Ok(LogicalChain::new(states).expect("decoded states satisfy chain invariants"))
    }

    fn argmax_next(&self, row: usize) -> usize {
        let logits = self.row(row);
        let unk = self.vocab.unk_index();
        let mut best = if unk == 0 { 1 } else { 0 };
        for (col, &l) in logits.iter().enumerate() {
            if col == unk {
                continue;
            }
            if l > logits[best] {
                best = col;
            }
        }
        best
    }
}

fn most_frequent_initial_state(library: &ExperienceLibrary, vocab: &Vocab) -> Option<usize> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for item in library.items() {
        let idx = vocab.index_of(&item.chain.states()[0]);
        *counts.entry(idx).or_insert(0) += 1;
    }
    // ties resolve to the smallest vocab index
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        .map(|(idx, _)| idx)
}

/// Adapts one model for several queries' retrieval batches. Pooled mode
/// concatenates all batches into one adaptation producing a single shared
/// set of parameters (returned once per query); otherwise each query adapts
/// independently.
pub fn batch_adapt<R: Real>(
    params: &ModelParams<R>,
    batches: &[Vec<TraceSample>],
    config: &AdaptConfig,
    pooled: bool,
) -> Result<Vec<Adapted<R>>, ModelError> {
    if pooled {
        let union: Vec<TraceSample> = batches.iter().flatten().cloned().collect();
        let shared = params.tta_adapt(&union, config)?;
        Ok(batches
            .iter()
            .map(|_| Adapted {
                params: shared.params.clone(),
                loss_trace: shared.loss_trace.clone(),
            })
            .collect())
    } else {
        batches
            .iter()
            .map(|batch| params.tta_adapt(batch, config))
            .collect()
    }
}

/// Snapshot document: `{"vocab": [...], "logits": [V*V numbers]}` at full
/// binary64 precision.
#[derive(Debug, Serialize, Deserialize)]
struct ModelSnapshot {
    vocab: Vec<String>,
    logits: Vec<f64>,
}

impl ModelParams<f64> {
    pub fn to_snapshot_json(&self) -> String {
        serde_json::to_string(&ModelSnapshot {
            vocab: self.vocab.states.clone(),
            logits: self.logits.clone(),
        })
        .expect("model snapshot serializes")
    }

    /// Loads a snapshot. The anchor fallback is not part of the snapshot
    /// format; callers that need one recompute it from the experience
    /// library (see the engine loader).
    pub fn from_snapshot_json(json: &str) -> Result<Self, ModelError> {
        let doc: ModelSnapshot =
            serde_json::from_str(json).map_err(|e| ModelError::Snapshot(e.to_string()))?;
        let v = doc.vocab.len();
        if v < 2 {
            return Err(ModelError::Snapshot(format!(
                "vocab must have at least 2 entries, found {v}"
            )));
        }
        if doc.vocab[v - 2] != END_SYMBOL || doc.vocab[v - 1] != UNK_SYMBOL {
            return Err(ModelError::Snapshot(
                "vocab must end with the reserved END and UNK symbols".into(),
            ));
        }
        if doc.logits.len() != v * v {
            return Err(ModelError::Snapshot(format!(
                "expected {} logits for V={v}, found {}",
                v * v,
                doc.logits.len()
            )));
        }
        if doc.logits.iter().any(|l| !l.is_finite()) {
            return Err(ModelError::Snapshot("logits must be finite".into()));
        }
        let lookup = doc
            .vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(Self {
            vocab: Vocab {
                states: doc.vocab,
                lookup,
            },
            logits: doc.logits,
            anchor_fallback: None,
        })
    }
}

/// Adaptation output for pluggable models.
pub struct AdaptOutcome {
    pub model: Box<dyn AdaptableModel>,
    pub loss_trace: Vec<f64>,
}

/// Contract the pipeline drives, so a remote language model can replace the
/// built-in transition table (see the wire protocol in [`crate::remote`]).
pub trait AdaptableModel: Send + Sync {
    fn log_prob(
        &self,
        question: &str,
        context: Option<&str>,
        chain: &LogicalChain,
    ) -> Result<f64, ModelError>;

    fn adapt(
        &self,
        batch: &[TraceSample],
        config: &AdaptConfig,
    ) -> Result<AdaptOutcome, ModelError>;

    fn sample(
        &self,
        question: &str,
        context: Option<&str>,
        config: &AdaptConfig,
    ) -> Result<LogicalChain, ModelError>;

    /// Optional answer-scoring hook; `None` defers to the pipeline's
    /// overlap scorer.
    fn score_option(&self, _question: &str, _option_text: &str) -> Option<f64> {
        None
    }
}

impl AdaptableModel for ModelParams<f64> {
    fn log_prob(
        &self,
        _question: &str,
        _context: Option<&str>,
        chain: &LogicalChain,
    ) -> Result<f64, ModelError> {
        Ok(ModelParams::log_prob(self, chain))
    }

    fn adapt(
        &self,
        batch: &[TraceSample],
        config: &AdaptConfig,
    ) -> Result<AdaptOutcome, ModelError> {
        let adapted = self.tta_adapt(batch, config)?;
        Ok(AdaptOutcome {
            model: Box::new(adapted.params),
            loss_trace: adapted.loss_trace,
        })
    }

    fn sample(
        &self,
        question: &str,
        context: Option<&str>,
        config: &AdaptConfig,
    ) -> Result<LogicalChain, ModelError> {
        self.sample_chain(question, context, config)
    }
}
