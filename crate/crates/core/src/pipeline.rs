//! End-to-end query answering: retrieve experience, adapt the model,
//! elicit a provisional chain, retrieve and filter skills per transition,
//! verify or repair each step, then score the answer. Every run produces an
//! [`EvidenceBundle`] carrying the full audit record.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{LogicalChain, Transition};
use crate::config::{ConfigError, EngineConfig};
use crate::experience::ExperienceLibrary;
use crate::library::LibraryError;
use crate::model::{AdaptConfig, AdaptableModel, ModelError, ModelParams, TraceSample};
use crate::rerank::RerankerParams;
use crate::retrieval::{
    filter_aligned, retrieve_experience, retrieve_skills, RetrievalError, ScoredSkill,
};
use crate::skills::{SkillLibrary, SkillRule, StepRole};
use crate::text::{jaccard, token_set, whitespace_token_count, TokenSet};

/// Current evidence-bundle schema version.
pub const BUNDLE_VERSION: u32 = 1;

/// Winning option scores below this are flagged low-confidence.
pub const LOW_CONFIDENCE_THRESHOLD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error("multiple-choice mode requires at least one option")]
    NoOptions,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Library(#[from] LibraryError),
}

/// One query: a question, an optional case text, and optional ordered
/// multiple-choice options (label -> option text).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub question: String,
    #[serde(default)]
    pub context: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub options: Option<BTreeMap<String, String>>,
}

impl Query {
    pub fn free_text(question: impl Into<String>, context: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            context: context.into(),
            options: None,
        }
    }

    pub fn multiple_choice<L, T>(
        question: impl Into<String>,
        context: impl Into<String>,
        options: impl IntoIterator<Item = (L, T)>,
    ) -> Self
    where
        L: Into<String>,
        T: Into<String>,
    {
        Self {
            question: question.into(),
            context: context.into(),
            options: Some(
                options
                    .into_iter()
                    .map(|(l, t)| (l.into(), t.into()))
                    .collect(),
            ),
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.question.trim().is_empty() {
            return Err(PipelineError::EmptyQuestion);
        }
        if let Some(options) = &self.options {
            if options.is_empty() {
                return Err(PipelineError::NoOptions);
            }
        }
        Ok(())
    }
}

/// Component switches used by the ablation runner; the full pipeline runs
/// with everything on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentMask {
    pub ttt: bool,
    pub experience: bool,
    pub skills: bool,
}

impl ComponentMask {
    pub const FULL: Self = Self {
        ttt: true,
        experience: true,
        skills: true,
    };

    pub const OFF: Self = Self {
        ttt: false,
        experience: false,
        skills: false,
    };
}

impl Default for ComponentMask {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceEvidence {
    pub id: String,
    pub question: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub context: Option<String>,
    pub answer: String,
    pub chain: Vec<String>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub performed: bool,
    pub steps: usize,
    pub eta: f64,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillCandidate {
    pub id: String,
    pub rule: String,
    pub evidence: String,
    pub retrieval_score: f64,
    pub align_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Verified,
    Repaired,
    Unverified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairRecord {
    /// The skill whose continuation replaced the tail.
    pub skill_id: String,
    pub old_tail: String,
    pub new_tail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    /// 1-based transition position, matching the chain as evaluated.
    pub index: usize,
    pub head: String,
    pub tail: String,
    /// Retrieved candidate pool for this transition (at most top-K).
    pub candidates: Vec<SkillCandidate>,
    /// Ids of candidates that passed the alignment filter, in rank order.
    pub filtered: Vec<String>,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub repair: Option<RepairRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    MultipleChoice,
    FreeText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub mode: AnswerMode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<String>,
    pub text: String,
    pub scores: BTreeMap<String, f64>,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    /// Whitespace-token count of every retrieved text injected beyond the
    /// bare question: each experience item's question, context, answer, and
    /// chain (the adaptation traces), plus each retrieved skill's rule text
    /// once per transition that retrieved it.
    pub added_tokens: u64,
    /// Wall time of the full run, milliseconds. Excluded from determinism
    /// comparisons.
    pub wall_ms: f64,
    pub adaptation_steps: usize,
}

/// The full per-query audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub bundle_version: u32,
    pub question: String,
    pub context: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub options: Option<BTreeMap<String, String>>,
    pub experience: Vec<ExperienceEvidence>,
    pub adaptation: AdaptationRecord,
    pub provisional_chain: Vec<String>,
    pub transitions: Vec<TransitionRecord>,
    pub verified_chain: Vec<String>,
    pub answer: AnswerRecord,
    pub accounting: Accounting,
    pub warnings: Vec<String>,
}

impl EvidenceBundle {
    /// Serialized form with stable key order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serializes")
    }

    /// Copy with timing zeroed, for determinism and parity comparisons.
    pub fn without_timings(&self) -> Self {
        let mut clone = self.clone();
        clone.accounting.wall_ms = 0.0;
        clone
    }
}

/// Recounts `added_tokens` from the bundle contents alone.
pub fn recount_added_tokens(bundle: &EvidenceBundle) -> u64 {
    let mut total = 0u64;
    for item in &bundle.experience {
        total += whitespace_token_count(&item.question);
        if let Some(ctx) = &item.context {
            total += whitespace_token_count(ctx);
        }
        total += whitespace_token_count(&item.answer);
        total += whitespace_token_count(&item.chain.join(" -> "));
    }
    for record in &bundle.transitions {
        for candidate in &record.candidates {
            total += whitespace_token_count(&candidate.rule);
        }
    }
    total
}

/// Verification outcome for a provisional chain.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifiedChain {
    /// Possibly repaired states.
    pub states: Vec<String>,
    pub records: Vec<TransitionRecord>,
}

/// Walks the provisional chain left to right once. Each transition is
/// "verified" when a filtered skill aligns at `tau_verify`; otherwise, if the
/// most head-aligned candidate clears `tau` on the head side but not the
/// tail side, the tail is replaced by the step following that skill's
/// best-matching step ("repaired") and downstream transitions see the new
/// state; otherwise "unverified". Repairs that would break chain invariants
/// are skipped.
pub fn verify_chain(
    provisional: &LogicalChain,
    question: &str,
    context: &str,
    skills: &SkillLibrary,
    config: &EngineConfig,
    reranker: Option<&RerankerParams<f64>>,
    skills_enabled: bool,
) -> Result<VerifiedChain, PipelineError> {
    let mut states: Vec<String> = provisional.states().to_vec();
    let mut records = Vec::with_capacity(states.len().saturating_sub(1));
    let tau = config.retrieval.tau;
    let tau_verify = config.tau_verify();

    for t in 1..states.len() {
        let transition = Transition {
            head: states[t - 1].clone(),
            tail: states[t].clone(),
            index: t,
            label: None,
        };
        let candidates: Vec<ScoredSkill<'_>> = if skills_enabled {
            retrieve_skills(
                question,
                context,
                &transition,
                skills,
                &config.retrieval,
                reranker,
            )?
        } else {
            Vec::new()
        };
        let filtered = filter_aligned(&candidates, tau);
        let mut verdict = Verdict::Unverified;
        let mut repair = None;

        if filtered.iter().any(|c| c.align >= tau_verify) {
            verdict = Verdict::Verified;
        } else if let Some((best, head_side, tail_side)) =
            most_head_aligned(&candidates, &transition)
        {
            if head_side >= tau && tail_side < tau {
                if let Some(new_tail) = continuation_after_best_step(best.skill, &transition) {
                    let keeps_invariants = new_tail != states[t - 1]
                        && states.get(t + 1).is_none_or(|next| new_tail != *next);
                    if keeps_invariants {
                        repair = Some(RepairRecord {
                            skill_id: best.skill.id.clone(),
                            old_tail: states[t].clone(),
                            new_tail: new_tail.clone(),
                        });
                        states[t] = new_tail;
                        verdict = Verdict::Repaired;
                    }
                }
            }
        }

        records.push(TransitionRecord {
            index: t,
            head: transition.head,
            tail: transition.tail,
            candidates: candidates
                .iter()
                .map(|c| SkillCandidate {
                    id: c.skill.id.clone(),
                    rule: c.skill.rule_text(),
                    evidence: c.skill.evidence.clone(),
                    retrieval_score: c.retrieval_score,
                    align_score: c.align,
                })
                .collect(),
            filtered: filtered.iter().map(|c| c.skill.id.clone()).collect(),
            verdict,
            repair,
        });
    }

    Ok(VerifiedChain { states, records })
}

/// The candidate with the highest head-side Jaccard, with its head and tail
/// side scores. Ties keep the earlier (higher-ranked) candidate.
fn most_head_aligned<'a, 'b>(
    candidates: &'b [ScoredSkill<'a>],
    transition: &Transition,
) -> Option<(&'b ScoredSkill<'a>, f64, f64)> {
    let head = transition.head_tokens();
    let tail = transition.tail_tokens();
    let side = |skill: &SkillRule, target: &TokenSet| -> f64 {
        skill
            .steps
            .iter()
            .map(|s| jaccard::<f64>(&s.tokens(), target))
            .fold(0.0, f64::max)
    };
    let mut best: Option<(&ScoredSkill<'_>, f64, f64)> = None;
    for candidate in candidates {
        let head_side = side(candidate.skill, &head);
        if best.is_none_or(|(_, h, _)| head_side > h) {
            let tail_side = side(candidate.skill, &tail);
            best = Some((candidate, head_side, tail_side));
        }
    }
    best
}

/// The step after the skill's best head-matching step, if any.
fn continuation_after_best_step(skill: &SkillRule, transition: &Transition) -> Option<String> {
    let head = transition.head_tokens();
    let mut best_idx = 0usize;
    let mut best_score = -1.0f64;
    for (i, step) in skill.steps.iter().enumerate() {
        let score: f64 = jaccard(&step.tokens(), &head);
        if score > best_score {
            best_score = score;
            best_idx = i;
        }
    }
    skill.steps.get(best_idx + 1).map(|s| s.text.clone())
}

/// Deterministic argmax over the label-ordered score map; ties keep the
/// first label. Invariant under positive rescaling of all scores.
pub(crate) fn argmax_label(scores: &BTreeMap<String, f64>) -> Option<(String, f64)> {
    let mut best: Option<(&String, f64)> = None;
    for (label, &score) in scores {
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((label, score));
        }
    }
    best.map(|(l, s)| (l.clone(), s))
}

fn build_answer(
    query: &Query,
    verified_states: &[String],
    filtered_skills: &[&SkillRule],
    experience: &[ExperienceEvidence],
    config: &EngineConfig,
    model: &dyn AdaptableModel,
) -> Result<AnswerRecord, PipelineError> {
    let terminal_tokens: TokenSet = verified_states
        .last()
        .map(|s| token_set(s))
        .unwrap_or_default();
    match &query.options {
        Some(options) => {
            let action_steps: Vec<TokenSet> = filtered_skills
                .iter()
                .flat_map(|skill| {
                    skill
                        .steps
                        .iter()
                        .filter(|s| s.role == Some(StepRole::Action))
                        .map(|s| s.tokens())
                })
                .collect();
            let mut scores = BTreeMap::new();
            for (label, text) in options {
                let score = match model.score_option(&query.question, text) {
                    Some(s) => s,
                    None => {
                        let option_tokens = token_set(text);
                        let terminal: f64 = if terminal_tokens.is_empty() {
                            0.0
                        } else {
                            jaccard(&option_tokens, &terminal_tokens)
                        };
                        let skill_boost = action_steps
                            .iter()
                            .map(|s| jaccard::<f64>(&option_tokens, s))
                            .fold(0.0, f64::max);
                        let experience_boost = if config.experience_boost {
                            experience
                                .iter()
                                .map(|e| jaccard::<f64>(&option_tokens, &token_set(&e.answer)))
                                .fold(0.0, f64::max)
                        } else {
                            0.0
                        };
                        terminal + 0.5 * skill_boost + 0.5 * experience_boost
                    }
                };
                scores.insert(label.clone(), score);
            }
            let (label, best) = argmax_label(&scores).ok_or(PipelineError::NoOptions)?;
            let text = options.get(&label).cloned().unwrap_or_default();
            Ok(AnswerRecord {
                mode: AnswerMode::MultipleChoice,
                label: Some(label),
                text,
                scores,
                low_confidence: best < LOW_CONFIDENCE_THRESHOLD,
            })
        }
        None => {
            let text = verified_states.last().cloned().unwrap_or_default();
            Ok(AnswerRecord {
                mode: AnswerMode::FreeText,
                label: None,
                low_confidence: text.is_empty(),
                text,
                scores: BTreeMap::new(),
            })
        }
    }
}

/// Runs the full loop against frozen libraries and a base model. Total for
/// every well-formed query: empty retrieval results, missing anchors, and
/// degenerate decodes degrade to warnings, never panics or errors.
pub fn run_pipeline(
    query: &Query,
    skills: &SkillLibrary,
    experience: &ExperienceLibrary,
    model: &dyn AdaptableModel,
    reranker: Option<&RerankerParams<f64>>,
    config: &EngineConfig,
    mask: ComponentMask,
) -> Result<EvidenceBundle, PipelineError> {
    let started = Instant::now();
    query.validate()?;
    config.validate()?;
    skills.index()?;
    experience.index()?;

    let mut warnings: Vec<String> = Vec::new();

    // Step 1: retrieve experience
    let batch_hits = if mask.experience {
        retrieve_experience(
            &query.question,
            &query.context,
            experience,
            &config.retrieval,
            reranker,
        )?
    } else {
        Vec::new()
    };
    let evidence: Vec<ExperienceEvidence> = batch_hits
        .iter()
        .map(|hit| ExperienceEvidence {
            id: hit.item.id.clone(),
            question: hit.item.question.clone(),
            context: hit.item.context.clone(),
            answer: hit.item.answer.clone(),
            chain: hit.item.chain.states().to_vec(),
            score: hit.score,
        })
        .collect();

    // Step 2: test-time adaptation
    let steps_requested = if mask.ttt { config.adapt.steps } else { 0 };
    let mut adaptation = AdaptationRecord {
        performed: false,
        steps: 0,
        eta: config.adapt.eta,
        loss_trace: Vec::new(),
    };
    let adapted_box;
    let active: &dyn AdaptableModel = if steps_requested == 0 {
        model
    } else if batch_hits.is_empty() {
        warnings.push("adaptation skipped: no experience retrieved".into());
        model
    } else {
        let batch: Vec<TraceSample> = batch_hits
            .iter()
            .map(|h| TraceSample::from(h.item))
            .collect();
        let adapt_config = AdaptConfig {
            steps: steps_requested,
            ..config.adapt
        };
        let outcome = model.adapt(&batch, &adapt_config)?;
        adaptation.performed = true;
        adaptation.steps = steps_requested;
        adaptation.loss_trace = outcome.loss_trace.clone();
        adapted_box = outcome.model;
        &*adapted_box
    };

    // Step 3: provisional chain
    let context_opt = (!query.context.trim().is_empty()).then_some(query.context.as_str());
    let provisional = match active.sample(&query.question, context_opt, &config.adapt) {
        Ok(chain) => Some(chain),
        Err(ModelError::NoAnchor) => {
            warnings.push("no provisional chain: question matches no vocabulary state".into());
            None
        }
        Err(ModelError::DegenerateChain { emitted }) => {
            warnings.push(format!(
                "no provisional chain: decode emitted {emitted} state(s)"
            ));
            None
        }
        Err(other) => return Err(other.into()),
    };

    // Steps 3b-4: per-transition skill retrieval, filtering, verify/repair
    let verified = match &provisional {
        Some(chain) => verify_chain(
            chain,
            &query.question,
            &query.context,
            skills,
            config,
            reranker,
            mask.skills,
        )?,
        None => VerifiedChain {
            states: Vec::new(),
            records: Vec::new(),
        },
    };

    let filtered_skills: Vec<&SkillRule> = {
        let mut seen = std::collections::BTreeSet::new();
        verified
            .records
            .iter()
            .flat_map(|r| r.filtered.iter())
            .filter(|id| seen.insert(id.as_str().to_string()))
            .filter_map(|id| skills.get_by_id(id))
            .collect()
    };

    let answer = build_answer(
        query,
        &verified.states,
        &filtered_skills,
        &evidence,
        config,
        active,
    )?;

    let mut bundle = EvidenceBundle {
        bundle_version: BUNDLE_VERSION,
        question: query.question.clone(),
        context: query.context.clone(),
        options: query.options.clone(),
        experience: evidence,
        adaptation,
        provisional_chain: provisional.map(|c| c.states().to_vec()).unwrap_or_default(),
        transitions: verified.records,
        verified_chain: if verified.states.len() >= 2 {
            verified.states
        } else {
            Vec::new()
        },
        answer,
        accounting: Accounting {
            added_tokens: 0,
            wall_ms: 0.0,
            adaptation_steps: steps_requested,
        },
        warnings,
    };
    bundle.accounting.added_tokens = recount_added_tokens(&bundle);
    bundle.accounting.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(bundle)
}

/// Frozen libraries, base model, optional reranker, and config bundled for
/// repeated queries. All state is read-only per run; concurrent queries need
/// no coordination.
#[derive(Debug)]
pub struct Engine {
    skills: SkillLibrary,
    experience: ExperienceLibrary,
    model: ModelParams<f64>,
    reranker: Option<RerankerParams<f64>>,
    config: EngineConfig,
}

impl Engine {
    pub fn new(
        mut skills: SkillLibrary,
        mut experience: ExperienceLibrary,
        model: ModelParams<f64>,
        reranker: Option<RerankerParams<f64>>,
        config: EngineConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        skills.freeze();
        experience.freeze();
        Ok(Self {
            skills,
            experience,
            model,
            reranker,
            config,
        })
    }

    pub fn skills(&self) -> &SkillLibrary {
        &self.skills
    }

    pub fn experience(&self) -> &ExperienceLibrary {
        &self.experience
    }

    pub fn model(&self) -> &ModelParams<f64> {
        &self.model
    }

    pub fn reranker(&self) -> Option<&RerankerParams<f64>> {
        self.reranker.as_ref()
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Overrides the run seed (recorded in evaluation reports).
    pub fn set_seed(&mut self, seed: u64) {
        self.config.seed = seed;
    }

    pub fn run(&self, query: &Query) -> Result<EvidenceBundle, PipelineError> {
        self.run_masked(query, ComponentMask::FULL)
    }

    pub fn run_masked(
        &self,
        query: &Query,
        mask: ComponentMask,
    ) -> Result<EvidenceBundle, PipelineError> {
        run_pipeline(
            query,
            &self.skills,
            &self.experience,
            &self.model,
            self.reranker.as_ref(),
            &self.config,
            mask,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experience::NewExperience;
    use crate::skills::SkillRule;

    fn cisplatin_experience() -> ExperienceLibrary {
        let mut lib = ExperienceLibrary::new();
        let mut add = |id: &str, q: &str, ctx: Option<&str>, a: &str, chain: &str| {
            lib.add(NewExperience {
                id: Some(id.into()),
                question: q.into(),
                context: ctx.map(Into::into),
                answer: a.into(),
                chain: LogicalChain::parse(chain).unwrap(),
            })
            .unwrap();
        };
        add(
            "exp-cisplatin",
            "What is the expected mechanism of cisplatin chemotherapy for transitional cell carcinoma of the bladder?",
            Some("Cisplatin chemotherapy binds DNA covalently and the resulting cross linking blocks replication, driving tumor cell apoptosis."),
            "DNA cross-linking",
            "Cisplatin chemotherapy drug -> covalent DNA binding -> DNA cross linking",
        );
        add(
            "exp-pneumonia",
            "How is community acquired pneumonia managed in adults?",
            None,
            "oral amoxicillin",
            "community acquired pneumonia -> chest imaging confirms infiltrate -> oral amoxicillin",
        );
        add(
            "exp-gout",
            "What explains sudden gout flares in the big toe?",
            None,
            "urate crystal deposition",
            "gout flare -> urate crystal deposition",
        );
        lib.freeze();
        lib
    }

    fn cisplatin_skills() -> SkillLibrary {
        let mut lib = SkillLibrary::new();
        lib.add(
            SkillRule::parse(
                "Platinum agents damage the cochlea through reactive oxygen species.",
                "Cisplatin chemotherapy -> ototoxicity hearing loss -> reactive oxygen species accumulate in cochlea -> oxidative stress damages cochlear hair cells -> antioxidants reduce cochlear damage",
            )
            .unwrap()
            .with_id("skill-ototoxicity"),
        )
        .unwrap();
        lib.add(
            SkillRule::parse(
                "Platinum chemotherapy works by covalently cross-linking DNA strands.",
                "Chemotherapy Drug -> Cross DNA Link -> Therapy",
            )
            .unwrap()
            .with_id("skill-dna-link"),
        )
        .unwrap();
        lib.freeze();
        lib
    }

    fn case_query() -> Query {
        Query::multiple_choice(
            "A man with transitional cell carcinoma of the bladder develops ringing ears and sensorineural hearing loss after his first course of neoadjuvant chemotherapy. The expected beneficial antitumor effect of the responsible drug is most likely due to which action?",
            "",
            [
                ("A", "Inhibition of proteasome"),
                ("B", "Hyperstabilization of microtubules"),
                ("C", "Generation of free radicals"),
                ("D", "Cross-linking of DNA"),
            ],
        )
    }

    fn cisplatin_engine() -> Engine {
        let experience = cisplatin_experience();
        let model = ModelParams::from_library(&experience).unwrap();
        Engine::new(
            cisplatin_skills(),
            experience,
            model,
            None,
            EngineConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn case_study_resolves_to_dna_cross_linking() {
        let engine = cisplatin_engine();
        let bundle = engine.run(&case_query()).unwrap();

        assert_eq!(bundle.answer.label.as_deref(), Some("D"));
        assert!(!bundle.answer.low_confidence);
        // the decoded chain follows the therapeutic mechanism
        assert_eq!(
            bundle.provisional_chain,
            vec![
                "Cisplatin chemotherapy drug",
                "covalent DNA binding",
                "DNA cross linking"
            ]
        );
        // the mechanism transition is never unverified
        let mechanism = bundle
            .transitions
            .iter()
            .find(|t| t.tail == "DNA cross linking")
            .expect("mechanism transition present");
        assert_ne!(mechanism.verdict, Verdict::Unverified);
        // hand-computed option scores: D matches the terminal exactly
        assert!((bundle.answer.scores["D"] - 1.0).abs() < 1e-12);
        assert_eq!(bundle.answer.scores["A"], 0.0);
        assert_eq!(bundle.answer.scores["B"], 0.0);
        assert_eq!(bundle.answer.scores["C"], 0.0);
    }

    #[test]
    fn bundles_are_deterministic_modulo_timing() {
        let engine = cisplatin_engine();
        let a = engine.run(&case_query()).unwrap();
        let b = engine.run(&case_query()).unwrap();
        assert_eq!(a.without_timings(), b.without_timings());
        assert_eq!(a.without_timings().to_json(), b.without_timings().to_json());
    }

    #[test]
    fn concurrent_queries_share_the_engine_without_coordination() {
        let engine = cisplatin_engine();
        let reference = engine.run(&case_query()).unwrap().without_timings();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..8)
                .map(|_| {
                    let engine = &engine;
                    scope.spawn(move || engine.run(&case_query()).unwrap().without_timings())
                })
                .collect();
            for handle in handles {
                assert_eq!(handle.join().unwrap(), reference);
            }
        });
    }

    #[test]
    fn empty_skills_library_degrades_to_unverified() {
        let experience = cisplatin_experience();
        let model = ModelParams::from_library(&experience).unwrap();
        let engine = Engine::new(
            SkillLibrary::new(),
            experience,
            model,
            None,
            EngineConfig::default(),
        )
        .unwrap();
        let bundle = engine.run(&case_query()).unwrap();
        assert!(!bundle.transitions.is_empty());
        for record in &bundle.transitions {
            assert!(record.candidates.is_empty());
            assert!(record.filtered.is_empty());
            assert_eq!(record.verdict, Verdict::Unverified);
        }
        // the answer still comes from the provisional chain alone
        assert_eq!(bundle.answer.label.as_deref(), Some("D"));
    }

    #[test]
    fn empty_libraries_still_produce_a_bundle() {
        let mut experience = ExperienceLibrary::new();
        experience.freeze();
        let model = ModelParams::uniform(crate::model::Vocab::from_states(Vec::<String>::new()));
        let engine = Engine::new(
            SkillLibrary::new(),
            experience,
            model,
            None,
            EngineConfig::default(),
        )
        .unwrap();
        let bundle = engine.run(&case_query()).unwrap();
        assert!(bundle.experience.is_empty());
        assert!(bundle.provisional_chain.is_empty());
        assert!(bundle.verified_chain.is_empty());
        assert!(!bundle.warnings.is_empty());
        assert_eq!(bundle.answer.label.as_deref(), Some("A"));
        assert!(bundle.answer.low_confidence);
        assert_eq!(bundle.accounting.added_tokens, 0);
    }

    #[test]
    fn no_adaptation_without_steps_or_batch() {
        let engine = cisplatin_engine();
        let mut config = EngineConfig::default();
        config.adapt.steps = 0;
        let experience = cisplatin_experience();
        let model = ModelParams::from_library(&experience).unwrap();
        let engine_n0 = Engine::new(cisplatin_skills(), experience, model, None, config).unwrap();
        let bundle = engine_n0.run(&case_query()).unwrap();
        assert!(!bundle.adaptation.performed);
        assert!(bundle.adaptation.loss_trace.is_empty());
        // an intentional n=0 skip is not warned about
        assert!(!bundle
            .warnings
            .iter()
            .any(|w| w.contains("adaptation skipped")));

        // experience masked off but TTT requested: warning, clean skip
        let bundle = engine
            .run_masked(
                &case_query(),
                ComponentMask {
                    ttt: true,
                    experience: false,
                    skills: true,
                },
            )
            .unwrap();
        assert!(!bundle.adaptation.performed);
        assert!(bundle
            .warnings
            .iter()
            .any(|w| w.contains("adaptation skipped")));
    }

    #[test]
    fn repair_replaces_head_aligned_tail() {
        // Only the mechanism skill, with tau high enough that it fails the
        // alignment filter on the side-effect transition but stays
        // head-aligned: the repair rule must fire and rewrite the tail.
        let mut skills = SkillLibrary::new();
        skills
            .add(
                SkillRule::parse(
                    "mechanism note",
                    "Chemotherapy Drug -> Cross DNA Link -> Therapy",
                )
                .unwrap()
                .with_id("skill-dna-link"),
            )
            .unwrap();
        skills.freeze();

        let provisional =
            LogicalChain::parse("Cisplatin chemotherapy drug -> free radicals -> hearing loss")
                .unwrap();
        let mut config = EngineConfig::default();
        config.retrieval.tau = 0.4;

        let verified =
            verify_chain(&provisional, "question", "", &skills, &config, None, true).unwrap();
        assert_eq!(verified.records[0].verdict, Verdict::Repaired);
        let repair = verified.records[0].repair.as_ref().unwrap();
        assert_eq!(repair.skill_id, "skill-dna-link");
        assert_eq!(repair.old_tail, "free radicals");
        assert_eq!(repair.new_tail, "Cross DNA Link");
        assert_eq!(verified.states[1], "Cross DNA Link");
        // downstream transition was re-evaluated against the repaired head
        assert_eq!(verified.records[1].head, "Cross DNA Link");
    }

    #[test]
    fn all_verified_when_filters_pass() {
        let engine = cisplatin_engine();
        let bundle = engine.run(&case_query()).unwrap();
        for record in &bundle.transitions {
            assert_eq!(record.verdict, Verdict::Verified);
        }
        assert_eq!(bundle.verified_chain, bundle.provisional_chain);
    }

    #[test]
    fn bundle_faithfulness_invariants() {
        let engine = cisplatin_engine();
        let bundle = engine.run(&case_query()).unwrap();
        assert!(bundle.experience.len() <= engine.config().retrieval.m);
        for record in &bundle.transitions {
            assert!(record.candidates.len() <= engine.config().retrieval.k);
            let candidate_ids: Vec<&str> =
                record.candidates.iter().map(|c| c.id.as_str()).collect();
            for id in &record.filtered {
                assert!(candidate_ids.contains(&id.as_str()));
            }
            if let Some(repair) = &record.repair {
                assert!(candidate_ids.contains(&repair.skill_id.as_str()));
            }
        }
    }

    #[test]
    fn accounting_matches_recount_and_counts_skills_per_use() {
        let engine = cisplatin_engine();
        let bundle = engine.run(&case_query()).unwrap();
        assert!(bundle.accounting.added_tokens > 0);
        assert_eq!(
            bundle.accounting.added_tokens,
            recount_added_tokens(&bundle)
        );
        // a ten-token rule retrieved once contributes at least ten
        let rule_tokens: u64 = bundle
            .transitions
            .iter()
            .flat_map(|t| t.candidates.iter())
            .map(|c| whitespace_token_count(&c.rule))
            .sum();
        assert!(bundle.accounting.added_tokens >= rule_tokens);
    }

    #[test]
    fn option_exactly_matching_terminal_wins() {
        let engine = cisplatin_engine();
        let query = Query::multiple_choice(
            "What is the expected mechanism of cisplatin chemotherapy?",
            "",
            [("A", "DNA cross linking"), ("B", "free radicals")],
        );
        let bundle = engine.run(&query).unwrap();
        assert_eq!(bundle.answer.label.as_deref(), Some("A"));
        assert!(bundle.answer.scores["A"] >= 1.0);
    }

    #[test]
    fn zero_scores_fall_back_to_first_label_flagged() {
        let engine = cisplatin_engine();
        let query = Query::multiple_choice(
            "What is the expected mechanism of cisplatin chemotherapy?",
            "",
            [("A", "qqq zzz"), ("B", "www yyy")],
        );
        let bundle = engine.run(&query).unwrap();
        assert_eq!(bundle.answer.label.as_deref(), Some("A"));
        assert!(bundle.answer.low_confidence);
    }

    #[test]
    fn experience_boost_is_off_by_default_and_scores_when_enabled() {
        // no skill action step or terminal overlap; only a retrieved answer
        // matches option B
        let query = Query::multiple_choice(
            "What is the expected mechanism of cisplatin chemotherapy?",
            "",
            [("A", "unrelated words"), ("B", "urate crystal deposition")],
        );
        let engine = cisplatin_engine();
        let bundle = engine.run(&query).unwrap();
        assert_eq!(bundle.answer.scores["B"], 0.0);

        let experience = cisplatin_experience();
        let model = ModelParams::from_library(&experience).unwrap();
        let config = EngineConfig {
            experience_boost: true,
            ..EngineConfig::default()
        };
        let boosted_engine =
            Engine::new(cisplatin_skills(), experience, model, None, config).unwrap();
        let boosted = boosted_engine.run(&query).unwrap();
        assert!(boosted.answer.scores["B"] > 0.0);
    }

    #[test]
    fn free_text_mode_returns_terminal_state() {
        let engine = cisplatin_engine();
        let query = Query::free_text(
            "What is the expected mechanism of cisplatin chemotherapy?",
            "",
        );
        let bundle = engine.run(&query).unwrap();
        assert_eq!(bundle.answer.mode, AnswerMode::FreeText);
        assert_eq!(bundle.answer.text, "DNA cross linking");
    }

    #[test]
    fn empty_question_and_empty_options_are_errors() {
        let engine = cisplatin_engine();
        assert!(matches!(
            engine.run(&Query::free_text("  ", "")),
            Err(PipelineError::EmptyQuestion)
        ));
        let query = Query {
            question: "q".into(),
            context: String::new(),
            options: Some(BTreeMap::new()),
        };
        assert!(matches!(engine.run(&query), Err(PipelineError::NoOptions)));
    }

    #[test]
    fn argmax_is_invariant_under_positive_scaling() {
        let mut scores = BTreeMap::new();
        scores.insert("A".to_string(), 0.2);
        scores.insert("B".to_string(), 0.7);
        scores.insert("C".to_string(), 0.7);
        let (label, _) = argmax_label(&scores).unwrap();
        let scaled: BTreeMap<String, f64> =
            scores.iter().map(|(k, &v)| (k.clone(), v * 37.5)).collect();
        let (scaled_label, _) = argmax_label(&scaled).unwrap();
        assert_eq!(label, scaled_label);
        assert_eq!(label, "B"); // tie between B and C resolves to label order
    }

    #[test]
    fn bundle_round_trips_through_json() {
        let engine = cisplatin_engine();
        let bundle = engine.run(&case_query()).unwrap();
        let json = bundle.to_json();
        let back: EvidenceBundle = serde_json::from_str(&json).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(back.bundle_version, BUNDLE_VERSION);
    }
}
