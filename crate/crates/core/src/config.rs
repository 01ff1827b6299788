//! Engine configuration: the aggregate knob set plus a flat `key = value`
//! config-file format (UTF-8, `#` comments, unknown keys rejected).

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::AdaptConfig;
use crate::retrieval::RetrievalConfig;
use crate::skills::hex_string;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown key {key:?} on line {line}")]
    UnknownKey { line: usize, key: String },
    #[error("invalid value for {key:?}: {message}")]
    InvalidValue { key: String, message: String },
}

/// Every tunable the engine exposes. `Default` is the documented baseline
/// (m=4, k=5, n=5, eta=0.1, tau=0.2).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EngineConfig {
    pub retrieval: RetrievalConfig,
    pub adapt: AdaptConfig,
    /// Verification threshold; `None` reuses `retrieval.tau`.
    pub tau_verify: Option<f64>,
    /// Strict library mode: reject uncoupled experience items at build time.
    pub strict: bool,
    /// Pool adaptation batches across concurrent queries.
    pub pooled: bool,
    /// Group size for pooled adaptation.
    pub pool_size: usize,
    /// Anchor decoding at the most frequent initial state when no question
    /// token matches the vocabulary.
    pub anchor_fallback: bool,
    /// Let retrieved experience answers boost option scores (off by default;
    /// the answer scorer conditions on the verified chain and filtered
    /// skills only).
    pub experience_boost: bool,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            retrieval: RetrievalConfig::default(),
            adapt: AdaptConfig::default(),
            tau_verify: None,
            strict: true,
            pooled: false,
            pool_size: 1,
            anchor_fallback: true,
            experience_boost: false,
            seed: 0,
        }
    }
}

impl EngineConfig {
    /// The effective verification threshold.
    pub fn tau_verify(&self) -> f64 {
        self.tau_verify.unwrap_or(self.retrieval.tau)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, message: String| ConfigError::InvalidValue {
            key: key.into(),
            message,
        };
        self.retrieval
            .validate()
            .map_err(|e| invalid("retrieval", e.to_string()))?;
        self.adapt
            .validate()
            .map_err(|e| invalid("adapt", e.to_string()))?;
        if let Some(tau) = self.tau_verify {
            if !(0.0..=1.0).contains(&tau) {
                return Err(invalid(
                    "tau_verify",
                    format!("must be in [0, 1], got {tau}"),
                ));
            }
        }
        if self.pool_size == 0 {
            return Err(invalid("pool_size", "must be >= 1".into()));
        }
        Ok(())
    }

    /// Parses the flat config format. Omitted keys keep their defaults;
    /// unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("expected `key = value`, got {line:?}"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            config.apply(key, value, line_no)?;
        }
        config.validate()?;
        Ok(config)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        fn parsed<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::InvalidValue {
                key: key.into(),
                message: format!("cannot parse {value:?}"),
            })
        }
        match key {
            "m" => self.retrieval.m = parsed(key, value)?,
            "k" => self.retrieval.k = parsed(key, value)?,
            "tau" => self.retrieval.tau = parsed(key, value)?,
            "bm25_k1" => self.retrieval.bm25_k1 = parsed(key, value)?,
            "bm25_b" => self.retrieval.bm25_b = parsed(key, value)?,
            "rerank" => self.retrieval.rerank_enabled = parsed(key, value)?,
            "step_query_context" => {
                self.retrieval.include_context_in_step_query = parsed(key, value)?
            }
            "n" => self.adapt.steps = parsed(key, value)?,
            "eta" => self.adapt.eta = parsed(key, value)?,
            "max_states" => self.adapt.max_states = parsed(key, value)?,
            "tau_verify" => self.tau_verify = Some(parsed(key, value)?),
            "strict" => self.strict = parsed(key, value)?,
            "pooled" => self.pooled = parsed(key, value)?,
            "pool_size" => self.pool_size = parsed(key, value)?,
            "anchor_fallback" => self.anchor_fallback = parsed(key, value)?,
            "experience_boost" => self.experience_boost = parsed(key, value)?,
            "seed" => self.seed = parsed(key, value)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.into(),
                })
            }
        }
        Ok(())
    }

    /// Renders the full key set in a stable order; `parse` inverts this.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut push = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        push("m", self.retrieval.m.to_string());
        push("k", self.retrieval.k.to_string());
        push("tau", self.retrieval.tau.to_string());
        push("bm25_k1", self.retrieval.bm25_k1.to_string());
        push("bm25_b", self.retrieval.bm25_b.to_string());
        push("rerank", self.retrieval.rerank_enabled.to_string());
        push(
            "step_query_context",
            self.retrieval.include_context_in_step_query.to_string(),
        );
        push("n", self.adapt.steps.to_string());
        push("eta", self.adapt.eta.to_string());
        push("max_states", self.adapt.max_states.to_string());
        if let Some(tau) = self.tau_verify {
            push("tau_verify", tau.to_string());
        }
        push("strict", self.strict.to_string());
        push("pooled", self.pooled.to_string());
        push("pool_size", self.pool_size.to_string());
        push("anchor_fallback", self.anchor_fallback.to_string());
        push("experience_boost", self.experience_boost.to_string());
        push("seed", self.seed.to_string());
        out
    }

    /// Stable hash of the rendered config, reported by the health endpoint
    /// and the snapshot manifest.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.render().as_bytes());
        hex_string(&hasher.finalize())[..16].to_string()
    }
}
