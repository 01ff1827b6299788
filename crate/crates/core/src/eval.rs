//! Metrics and harnesses: unigram-F1 trace quality, transition-level
//! coverage, retrieval top-k accuracy, the component-mask ablation runner,
//! and mechanical error tagging.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::chain::LogicalChain;
use crate::experience::ExperienceLibrary;
use crate::library::LibraryError;
use crate::num::Real;
use crate::pipeline::{ComponentMask, Engine, EvidenceBundle, PipelineError};
use crate::skills::SkillRule;
use crate::text::{jaccard, token_counts, token_set, TokenSet};

/// Per-side Jaccard a candidate transition needs to entail a reference
/// transition. Tuned so close paraphrases of the same step still count.
pub const ENTAILMENT_THRESHOLD: f64 = 0.5;

/// Token overlap below which a filtered skill does not count as supporting
/// the gold option (used by the error tagger).
pub const SUPPORT_THRESHOLD: f64 = 0.25;

/// ROUGE-1 F1 over content tokens with multiplicity (clipped counts).
/// 0 when either side has no content tokens.
pub fn rouge1<R: Real>(candidate: &str, reference: &str) -> R {
    let cand = token_counts(candidate);
    let reference = token_counts(reference);
    let cand_total: u32 = cand.values().sum();
    let ref_total: u32 = reference.values().sum();
    if cand_total == 0 || ref_total == 0 {
        return R::zero();
    }
    let overlap: u32 = cand
        .iter()
        .map(|(token, &count)| count.min(*reference.get(token).unwrap_or(&0)))
        .sum();
    let precision = R::from_config(f64::from(overlap) / f64::from(cand_total));
    let recall = R::from_config(f64::from(overlap) / f64::from(ref_total));
    if precision + recall == R::zero() {
        return R::zero();
    }
    let two = R::from_config(2.0);
    two * precision * recall / (precision + recall)
}

/// Fraction of reference transitions entailed by some candidate transition,
/// where entailment is head Jaccard and tail Jaccard both at or above the
/// threshold.
pub fn atomic_coverage<R: Real>(candidate: &LogicalChain, reference: &LogicalChain) -> R {
    atomic_coverage_with(
        candidate,
        reference,
        ENTAILMENT_THRESHOLD,
        ENTAILMENT_THRESHOLD,
    )
}

pub fn atomic_coverage_with<R: Real>(
    candidate: &LogicalChain,
    reference: &LogicalChain,
    head_threshold: f64,
    tail_threshold: f64,
) -> R {
    let candidate_transitions: Vec<(TokenSet, TokenSet)> = candidate
        .transitions()
        .iter()
        .map(|t| (t.head_tokens(), t.tail_tokens()))
        .collect();
    let reference_transitions = reference.transitions();
    let covered = reference_transitions
        .iter()
        .filter(|r| {
            let head = r.head_tokens();
            let tail = r.tail_tokens();
            candidate_transitions.iter().any(|(ch, ct)| {
                jaccard::<f64>(ch, &head) >= head_threshold
                    && jaccard::<f64>(ct, &tail) >= tail_threshold
            })
        })
        .count();
    R::from_config(covered as f64 / reference_transitions.len() as f64)
}

/// One retriever run: the ranked document ids a query produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedRun {
    pub query_id: String,
    pub ranked: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkReport {
    /// (k, fraction of queries whose gold id appears in the top k).
    pub accuracies: Vec<(usize, f64)>,
    /// Queries whose gold id is not in the corpus at all; counted as misses.
    pub missing_gold: Vec<String>,
}

impl TopkReport {
    pub fn accuracy_at(&self, k: usize) -> Option<f64> {
        self.accuracies
            .iter()
            .find(|(kk, _)| *kk == k)
            .map(|(_, a)| *a)
    }
}

/// Top-k retrieval accuracy for each requested k. A query whose gold id is
/// missing from the corpus counts as a miss at every k and is reported.
pub fn topk_accuracy(
    runs: &[RankedRun],
    gold: &BTreeMap<String, String>,
    corpus_ids: &BTreeSet<String>,
    ks: &[usize],
) -> TopkReport {
    let mut missing_gold = Vec::new();
    let mut hits_at: Vec<usize> = vec![0; ks.len()];
    let mut total = 0usize;
    for run in runs {
        let Some(gold_id) = gold.get(&run.query_id) else {
            continue;
        };
        total += 1;
        if !corpus_ids.contains(gold_id) {
            missing_gold.push(run.query_id.clone());
            continue;
        }
        let rank = run.ranked.iter().position(|id| id == gold_id);
        if let Some(rank) = rank {
            for (slot, &k) in hits_at.iter_mut().zip(ks.iter()) {
                if rank < k {
                    *slot += 1;
                }
            }
        }
    }
    let accuracies = ks
        .iter()
        .zip(hits_at.iter())
        .map(|(&k, &hits)| {
            (
                k,
                if total == 0 {
                    0.0
                } else {
                    hits as f64 / total as f64
                },
            )
        })
        .collect();
    TopkReport {
        accuracies,
        missing_gold,
    }
}

/// Benchmark question: JSONL record with ordered options and a gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub context: Option<String>,
    pub options: BTreeMap<String, String>,
    pub gold: String,
    #[serde(
        skip_serializing_if = "Option::is_none",
        default,
        deserialize_with = "crate::chain::deserialize_flexible_opt"
    )]
    pub reference_chain: Option<LogicalChain>,
}

/// The four-way mechanical error taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorTag {
    IrrelevantOrMissingEvidence,
    MisleadingEvidence,
    InsufficientReasoning,
    ForgottenKnowledge,
}

/// Mechanical error tagging for an incorrect prediction. Correct answers
/// never carry tags.
///
/// - irrelevant/missing: every transition's filtered skill set is empty;
/// - misleading: some filtered skill's best-aligned step overlaps a wrong
///   option more than the gold option;
/// - insufficient reasoning: a filtered skill supports the gold option yet
///   the answer is still wrong;
/// - forgotten knowledge: a reference-chain transition exists verbatim in
///   the experience library but none of its items were retrieved.
pub fn tag_errors(
    bundle: &EvidenceBundle,
    gold_label: &str,
    reference_chain: Option<&LogicalChain>,
    experience: &ExperienceLibrary,
) -> Result<BTreeSet<ErrorTag>, LibraryError> {
    let mut tags = BTreeSet::new();
    if bundle.answer.label.as_deref() == Some(gold_label) {
        return Ok(tags);
    }

    if bundle.transitions.iter().all(|t| t.filtered.is_empty()) {
        tags.insert(ErrorTag::IrrelevantOrMissingEvidence);
    }

    if let Some(options) = &bundle.options {
        let gold_tokens = options
            .get(gold_label)
            .map(|t| token_set(t))
            .unwrap_or_default();
        let wrong_tokens: Vec<TokenSet> = options
            .iter()
            .filter(|(label, _)| label.as_str() != gold_label)
            .map(|(_, text)| token_set(text))
            .collect();
        for record in &bundle.transitions {
            let head = token_set(&record.head);
            let tail = token_set(&record.tail);
            for candidate in record
                .candidates
                .iter()
                .filter(|c| record.filtered.contains(&c.id))
            {
                let Ok(skill) = SkillRule::parse(&candidate.evidence, &candidate.rule) else {
                    continue;
                };
                if let Some(step_tokens) = best_aligned_step(&skill, &head, &tail) {
                    let gold_overlap: f64 = jaccard(&step_tokens, &gold_tokens);
                    let worst_wrong = wrong_tokens
                        .iter()
                        .map(|w| jaccard::<f64>(&step_tokens, w))
                        .fold(0.0, f64::max);
                    if worst_wrong > gold_overlap {
                        tags.insert(ErrorTag::MisleadingEvidence);
                    }
                }
                let supports_gold = skill
                    .steps
                    .iter()
                    .any(|s| jaccard::<f64>(&s.tokens(), &gold_tokens) >= SUPPORT_THRESHOLD);
                if supports_gold {
                    tags.insert(ErrorTag::InsufficientReasoning);
                }
            }
        }
    }

    if let Some(reference) = reference_chain {
        let retrieved: BTreeSet<&str> = bundle.experience.iter().map(|e| e.id.as_str()).collect();
        for transition in reference.transitions() {
            let owners = experience.items_with_transition(&transition)?;
            if !owners.is_empty()
                && owners
                    .iter()
                    .all(|item| !retrieved.contains(item.id.as_str()))
            {
                tags.insert(ErrorTag::ForgottenKnowledge);
                break;
            }
        }
    }

    Ok(tags)
}

fn best_aligned_step(skill: &SkillRule, head: &TokenSet, tail: &TokenSet) -> Option<TokenSet> {
    skill
        .steps
        .iter()
        .map(|s| {
            let tokens = s.tokens();
            let score: f64 = jaccard::<f64>(&tokens, head) + jaccard::<f64>(&tokens, tail);
            (tokens, score)
        })
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(tokens, _)| tokens)
}

/// Per-query evaluation record: prediction, metrics, tags, and the full
/// bundle (timings stripped so reports stay byte-identical across runs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub gold: String,
    pub predicted: Option<String>,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rouge1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub atomic_coverage: Option<f64>,
    pub error_tags: Vec<ErrorTag>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub run_error: Option<String>,
    pub bundle: Option<EvidenceBundle>,
}

/// One ablation configuration's aggregate row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub mask: ComponentMask,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_added_tokens: f64,
    /// Present only when timings were requested; omitted by default so
    /// reports are byte-identical across runs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_wall_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_rouge1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_atomic_coverage: Option<f64>,
    pub error_tag_counts: BTreeMap<ErrorTag, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub seed: u64,
    pub questions: usize,
    pub rows: Vec<AblationRow>,
    pub records: Vec<(String, Vec<EvalRecord>)>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text summary, one line per configuration.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&format!(
                "{:<16} accuracy {:>5.1}% ({}/{})  mean added tokens {:>8.1}",
                row.name,
                row.accuracy * 100.0,
                row.correct,
                row.total,
                row.mean_added_tokens,
            ));
            if let Some(ms) = row.mean_wall_ms {
                out.push_str(&format!("  mean wall ms {ms:.2}"));
            }
            out.push('\n');
        }
        out
    }
}

/// The component masks mirroring the ablation table rows.
pub fn standard_masks() -> Vec<(String, ComponentMask)> {
    vec![
        ("full".into(), ComponentMask::FULL),
        (
            "skills-only".into(),
            ComponentMask {
                ttt: false,
                experience: false,
                skills: true,
            },
        ),
        (
            "ttt-experience".into(),
            ComponentMask {
                ttt: true,
                experience: true,
                skills: false,
            },
        ),
        (
            "ttt-only".into(),
            ComponentMask {
                ttt: true,
                experience: false,
                skills: false,
            },
        ),
        ("baseline".into(), ComponentMask::OFF),
    ]
}

/// Runs the benchmark under each component mask. Queries evaluate in id
/// order; per-query failures are recorded, not fatal. Timing columns are
/// filled only when `include_timings` is set.
pub fn run_ablation(
    benchmark: &[BenchmarkItem],
    engine: &Engine,
    configurations: &[(String, ComponentMask)],
    include_timings: bool,
    include_bundles: bool,
) -> Result<AblationReport, PipelineError> {
    let mut items: Vec<&BenchmarkItem> = benchmark.iter().collect();
    items.sort_by(|a, b| a.id.cmp(&b.id));

    let mut rows = Vec::new();
    let mut all_records = Vec::new();
    for (name, mask) in configurations {
        let mut records = Vec::with_capacity(items.len());
        let mut correct = 0usize;
        let mut token_sum = 0u64;
        let mut wall_sum = 0.0f64;
        let mut rouge_sum = 0.0f64;
        let mut coverage_sum = 0.0f64;
        let mut chain_metrics = 0usize;
        let mut tag_counts: BTreeMap<ErrorTag, usize> = BTreeMap::new();
        for item in &items {
            let query = crate::pipeline::Query {
                question: item.question.clone(),
                context: item.context.clone().unwrap_or_default(),
                options: Some(item.options.clone()),
            };
            match engine.run_masked(&query, *mask) {
                Ok(bundle) => {
                    let predicted = bundle.answer.label.clone();
                    let is_correct = predicted.as_deref() == Some(item.gold.as_str());
                    if is_correct {
                        correct += 1;
                    }
                    token_sum += bundle.accounting.added_tokens;
                    wall_sum += bundle.accounting.wall_ms;
                    let (mut rouge, mut coverage) = (None, None);
                    if let Some(reference) = &item.reference_chain {
                        if bundle.verified_chain.len() >= 2 {
                            let chain = LogicalChain::new(bundle.verified_chain.clone())
                                .expect("verified chain is valid");
                            rouge = Some(rouge1::<f64>(&chain.to_text(), &reference.to_text()));
                            coverage = Some(atomic_coverage::<f64>(&chain, reference));
                        } else {
                            rouge = Some(0.0);
                            coverage = Some(0.0);
                        }
                        rouge_sum += rouge.unwrap_or(0.0);
                        coverage_sum += coverage.unwrap_or(0.0);
                        chain_metrics += 1;
                    }
                    let tags = tag_errors(
                        &bundle,
                        &item.gold,
                        item.reference_chain.as_ref(),
                        engine.experience(),
                    )?;
                    for tag in &tags {
                        *tag_counts.entry(*tag).or_insert(0) += 1;
                    }
                    records.push(EvalRecord {
                        query_id: item.id.clone(),
                        gold: item.gold.clone(),
                        predicted,
                        correct: is_correct,
                        rouge1: rouge,
                        atomic_coverage: coverage,
                        error_tags: tags.into_iter().collect(),
                        run_error: None,
                        bundle: include_bundles.then(|| bundle.without_timings()),
                    });
                }
                Err(err) => {
                    records.push(EvalRecord {
                        query_id: item.id.clone(),
                        gold: item.gold.clone(),
                        predicted: None,
                        correct: false,
                        rouge1: None,
                        atomic_coverage: None,
                        error_tags: Vec::new(),
                        run_error: Some(err.to_string()),
                        bundle: None,
                    });
                }
            }
        }
        let total = items.len();
        rows.push(AblationRow {
            name: name.clone(),
            mask: *mask,
            total,
            correct,
            accuracy: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
            mean_added_tokens: if total == 0 {
                0.0
            } else {
                token_sum as f64 / total as f64
            },
            mean_wall_ms: include_timings.then(|| {
                if total == 0 {
                    0.0
                } else {
                    wall_sum / total as f64
                }
            }),
            mean_rouge1: (chain_metrics > 0).then(|| rouge_sum / chain_metrics as f64),
            mean_atomic_coverage: (chain_metrics > 0).then(|| coverage_sum / chain_metrics as f64),
            error_tag_counts: tag_counts,
        });
        all_records.push((name.clone(), records));
    }

    Ok(AblationReport {
        schema_version: 1,
        seed: engine.config().seed,
        questions: items.len(),
        rows,
        records: all_records,
    })
}
