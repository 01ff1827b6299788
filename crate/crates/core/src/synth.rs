//! Deterministic synthetic benchmarks and fixtures.
//!
//! Everything here is formula-generated so repeated builds produce
//! byte-identical fixture files. Three benchmark families:
//!
//! - a gated multiple-choice benchmark where each question is answerable
//!   only when the decisive skill's action step is retrieved at the right
//!   transition (ablation ordering);
//! - step-mismatch cases where the decisive rule shares tokens with a
//!   mid-chain transition but not with the question (step-alignment
//!   dominance);
//! - a retrieval corpus whose hard queries lexically favor long rare-token
//!   distractors over the short gold document (reranker gain).

use serde::Serialize;

use crate::chain::{LogicalChain, Transition};
use crate::eval::BenchmarkItem;
use crate::ingest::{ExperienceRecord, SkillRecord};
use crate::rerank::TrainingTriplet;

/// Renders records as JSONL.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// A generated benchmark with the libraries it runs against.
#[derive(Debug, Clone)]
pub struct GatedBenchmark {
    pub experience: Vec<ExperienceRecord>,
    pub skills: Vec<SkillRecord>,
    pub benchmark: Vec<BenchmarkItem>,
}

/// 40-question gated benchmark: every question flips on one skill gate.
///
/// The experience trace teaches the chain condition -> drug -> mechanism;
/// the gold option's tokens appear only in the decisive skill's action step,
/// so answering correctly requires the full adapt-decode-retrieve-verify
/// loop. Gold labels cycle A..D.
pub fn gated_benchmark(questions: usize) -> GatedBenchmark {
    let labels = ["A", "B", "C", "D"];
    let mut experience = Vec::with_capacity(questions);
    let mut skills = Vec::with_capacity(questions);
    let mut benchmark = Vec::with_capacity(questions);
    for j in 0..questions {
        let cond = format!("cond{j:02}");
        let drug = format!("drug{j:02}");
        let mech = format!("mech{j:02}");
        let gold_term = format!("goldterm{j:02}");
        let chain_text = format!("{cond} presentation -> {drug} administration -> {mech} pathway");
        experience.push(ExperienceRecord {
            id: Some(format!("gexp{j:02}")),
            question: format!(
                "Patient presentation with {cond} after receiving {drug} needs the mechanism of benefit explained"
            ),
            context: None,
            answer: format!("{mech} pathway"),
            chain: LogicalChain::parse(&chain_text).expect("generated chain is valid"),
        });
        skills.push(SkillRecord {
            id: Some(format!("gskill{j:02}")),
            evidence: format!("Synthetic guideline entry for {drug}."),
            rule: format!("{drug} administration {mech} -> {gold_term} therapy"),
            source: None,
        });
        let gold_label = labels[j % labels.len()];
        let decoys = [
            format!("decoyone{j:02} blocker"),
            format!("decoytwo{j:02} inhibitor"),
            format!("decoythree{j:02} agonist"),
        ];
        let mut decoy_iter = decoys.into_iter();
        let options = labels
            .iter()
            .map(|label| {
                let text = if *label == gold_label {
                    format!("{gold_term} therapy")
                } else {
                    decoy_iter.next().expect("three decoys for three labels")
                };
                (label.to_string(), text)
            })
            .collect();
        benchmark.push(BenchmarkItem {
            id: format!("gq{j:02}"),
            question: format!(
                "A patient presentation with {cond} improved after receiving {drug}. Which mechanism explains the benefit?"
            ),
            context: None,
            options,
            gold: gold_label.to_string(),
            reference_chain: Some(LogicalChain::parse(&chain_text).expect("valid chain")),
        });
    }
    GatedBenchmark {
        experience,
        skills,
        benchmark,
    }
}

/// One step-mismatch case: the decisive rule is reachable only through the
/// mid-chain transition, never through the question's own tokens.
#[derive(Debug, Clone)]
pub struct DominanceCase {
    pub question: String,
    pub transition: Transition,
    pub decisive_skill_id: String,
}

/// Generates `n` step-mismatch cases plus the skill records (one decisive
/// and one topical distractor per case).
pub fn dominance_cases(n: usize) -> (Vec<DominanceCase>, Vec<SkillRecord>) {
    let mut cases = Vec::with_capacity(n);
    let mut skills = Vec::with_capacity(2 * n);
    for i in 0..n {
        let finding = format!("finding{i:03}");
        let marker = format!("marker{i:03}");
        let procedure = format!("procedure{i:03}");
        let outcome = format!("outcome{i:03}");
        let note = format!("note{i:03}");
        let decisive_id = format!("dom-decisive-{i:03}");
        skills.push(SkillRecord {
            id: Some(decisive_id.clone()),
            evidence: format!("Decision rule covering {marker}."),
            rule: format!("{marker} elevated -> {procedure} indicated -> {outcome} review"),
            source: None,
        });
        skills.push(SkillRecord {
            id: Some(format!("dom-distractor-{i:03}")),
            evidence: format!("Overview text about {finding}."),
            rule: format!(
                "{finding} presentation -> clinic observation {note} -> routine documentation"
            ),
            source: None,
        });
        cases.push(DominanceCase {
            question: format!("Best management for presentation {finding} in clinic"),
            transition: Transition::new(
                format!("{marker} elevated"),
                format!("{procedure} indicated"),
            ),
            decisive_skill_id: decisive_id,
        });
    }
    (cases, skills)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CorpusDoc {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RetrievalQuery {
    pub id: String,
    pub text: String,
    pub gold: String,
}

#[derive(Debug, Clone)]
pub struct RerankerBenchmark {
    pub corpus: Vec<CorpusDoc>,
    pub queries: Vec<RetrievalQuery>,
    pub train: Vec<TrainingTriplet>,
}

const MED_POOL: [&str; 12] = [
    "medalpha",
    "medbeta",
    "medgamma",
    "meddelta",
    "medepsilon",
    "medzeta",
    "medeta",
    "medtheta",
    "mediota",
    "medkappa",
    "medlambda",
    "medmu",
];

const DISTRACTORS_PER_QUERY: usize = 6;
const JUNK_PER_DISTRACTOR: usize = 15;

/// All 4-subsets of the 12-token pool in lexicographic order (C(12,4)=495),
/// so every query gets a unique token combination.
#[allow(clippy::needless_range_loop)]
fn subset(index: usize) -> [&'static str; 4] {
    let mut count = 0usize;
    for a in 0..MED_POOL.len() {
        for b in (a + 1)..MED_POOL.len() {
            for c in (b + 1)..MED_POOL.len() {
                for d in (c + 1)..MED_POOL.len() {
                    if count == index {
                        return [MED_POOL[a], MED_POOL[b], MED_POOL[c], MED_POOL[d]];
                    }
                    count += 1;
                }
            }
        }
    }
    panic!("subset index {index} out of range (max 494)");
}

fn distractor_text(tokens: &[&str; 4], rare: &str, tag: &str, j: usize) -> String {
    let mut words: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    words.push(rare.to_string());
    for w in 0..JUNK_PER_DISTRACTOR {
        words.push(format!("junk{tag}n{j}w{w:02}"));
    }
    words.join(" ")
}

/// Retrieval benchmark with `eval_queries` evaluation queries (half easy,
/// half hard) and `train_queries` hard-style training triplets.
///
/// Hard queries carry a rare token that appears only in six long distractor
/// documents, which outscore the short gold document under BM25; coverage
/// and length features separate them, so a trained reranker recovers the
/// gold. Easy queries have no distractors and are lexically trivial.
pub fn reranker_benchmark(eval_queries: usize, train_queries: usize) -> RerankerBenchmark {
    assert!(
        eval_queries + train_queries <= 495,
        "not enough unique token subsets"
    );
    let mut corpus = Vec::new();
    let mut queries = Vec::with_capacity(eval_queries);
    for i in 0..eval_queries {
        let tokens = subset(i);
        let rare = format!("rare{i:03}");
        let gold_id = format!("doc{i:03}-gold");
        corpus.push(CorpusDoc {
            id: gold_id.clone(),
            text: tokens.join(" "),
        });
        let hard = i % 2 == 1;
        if hard {
            for j in 0..DISTRACTORS_PER_QUERY {
                corpus.push(CorpusDoc {
                    id: format!("doc{i:03}-n{j}"),
                    text: distractor_text(&tokens, &rare, &format!("e{i:03}"), j),
                });
            }
        }
        queries.push(RetrievalQuery {
            id: format!("q{i:03}"),
            text: format!("{} {rare}", tokens.join(" ")),
            gold: gold_id,
        });
    }
    // Training mirrors the eval distribution: hard triplets pit the gold
    // against long rare-token distractors, easy ones against competing short
    // documents, so no single feature (BM25 included) is a shortcut.
    let mut train = Vec::with_capacity(train_queries);
    for t in 0..train_queries {
        let tokens = subset(eval_queries + t);
        let rare = format!("trainrare{t:03}");
        let negatives = if t % 2 == 0 {
            (0..DISTRACTORS_PER_QUERY)
                .map(|j| distractor_text(&tokens, &rare, &format!("t{t:03}"), j))
                .collect()
        } else {
            (0..DISTRACTORS_PER_QUERY)
                .map(|j| {
                    let other = subset(eval_queries + (t + j + 1) % train_queries);
                    other.join(" ")
                })
                .collect()
        };
        train.push(TrainingTriplet {
            query: format!("{} {rare}", tokens.join(" ")),
            positive: tokens.join(" "),
            negatives,
        });
    }
    RerankerBenchmark {
        corpus,
        queries,
        train,
    }
}

/// The bladder-cancer chemotherapy case: a mechanism-vs-side-effect
/// disambiguation where the side-effect explains the symptoms but the
/// question asks for the therapeutic mechanism.
pub fn case_study_fixture() -> GatedBenchmark {
    let experience = vec![
        ExperienceRecord {
            id: Some("exp-cisplatin".into()),
            question: "What is the expected mechanism of cisplatin chemotherapy for transitional cell carcinoma of the bladder?".into(),
            context: Some("Cisplatin chemotherapy binds DNA covalently and the resulting cross linking blocks replication, driving tumor cell apoptosis.".into()),
            answer: "DNA cross-linking".into(),
            chain: LogicalChain::parse(
                "Cisplatin chemotherapy drug -> covalent DNA binding -> DNA cross linking",
            )
            .expect("valid chain"),
        },
        ExperienceRecord {
            id: Some("exp-pneumonia".into()),
            question: "How is community acquired pneumonia managed in adults?".into(),
            context: None,
            answer: "oral amoxicillin".into(),
            chain: LogicalChain::parse(
                "community acquired pneumonia -> chest imaging confirms infiltrate -> oral amoxicillin",
            )
            .expect("valid chain"),
        },
        ExperienceRecord {
            id: Some("exp-gout".into()),
            question: "What explains sudden gout flares in the big toe?".into(),
            context: None,
            answer: "urate crystal deposition".into(),
            chain: LogicalChain::parse("gout flare -> urate crystal deposition").expect("valid chain"),
        },
    ];
    let skills = vec![
        SkillRecord {
            id: Some("skill-ototoxicity".into()),
            evidence: "Platinum agents damage the cochlea through reactive oxygen species.".into(),
            rule: "Cisplatin chemotherapy -> ototoxicity hearing loss -> reactive oxygen species accumulate in cochlea -> oxidative stress damages cochlear hair cells -> antioxidants reduce cochlear damage".into(),
            source: None,
        },
        SkillRecord {
            id: Some("skill-dna-link".into()),
            evidence: "Platinum chemotherapy works by covalently cross-linking DNA strands.".into(),
            rule: "Chemotherapy Drug -> Cross DNA Link -> Therapy".into(),
            source: None,
        },
    ];
    let benchmark = vec![BenchmarkItem {
        id: "case-cisplatin".into(),
        question: "A man with transitional cell carcinoma of the bladder develops ringing ears and sensorineural hearing loss after his first course of neoadjuvant chemotherapy. The expected beneficial antitumor effect of the responsible drug is most likely due to which action?".into(),
        context: None,
        options: [
            ("A", "Inhibition of proteasome"),
            ("B", "Hyperstabilization of microtubules"),
            ("C", "Generation of free radicals"),
            ("D", "Cross-linking of DNA"),
        ]
        .into_iter()
        .map(|(l, t)| (l.to_string(), t.to_string()))
        .collect(),
        gold: "D".into(),
        reference_chain: Some(
            LogicalChain::parse(
                "Cisplatin chemotherapy drug -> covalent DNA binding -> DNA cross linking",
            )
            .expect("valid chain"),
        ),
    }];
    GatedBenchmark {
        experience,
        skills,
        benchmark,
    }
}

/// 25 experience records of which exactly 3 are deliberately uncoupled
/// (answer shares no token with the chain terminal); for audit-format
/// checks with strict mode off: 22/25 = 0.88.
pub fn audit_fixture() -> Vec<ExperienceRecord> {
    let uncoupled = [5usize, 12, 19];
    (0..25)
        .map(|j| {
            let answer = if uncoupled.contains(&j) {
                format!("offtopic{j:02} reply")
            } else {
                format!("topic{j:02} resolution")
            };
            ExperienceRecord {
                id: Some(format!("aud{j:02}")),
                question: format!("How does topic{j:02} resolve?"),
                context: None,
                answer,
                chain: LogicalChain::parse(&format!("topic{j:02} onset -> topic{j:02} resolution"))
                    .expect("valid chain"),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::check_qa_coupling;

    #[test]
    fn gated_benchmark_is_deterministic_and_sized() {
        let a = gated_benchmark(40);
        let b = gated_benchmark(40);
        assert_eq!(a.benchmark.len(), 40);
        assert_eq!(a.skills.len(), 40);
        assert_eq!(a.experience.len(), 40);
        assert_eq!(to_jsonl(&a.benchmark), to_jsonl(&b.benchmark));
        // gold labels cycle
        assert_eq!(a.benchmark[0].gold, "A");
        assert_eq!(a.benchmark[5].gold, "B");
        // every experience record is coupled
        for record in &a.experience {
            assert!(check_qa_coupling(&record.chain, &record.answer).coupled);
        }
    }

    #[test]
    fn dominance_rules_avoid_question_tokens() {
        let (cases, skills) = dominance_cases(10);
        assert_eq!(cases.len(), 10);
        assert_eq!(skills.len(), 20);
        for case in &cases {
            let decisive = skills
                .iter()
                .find(|s| s.id.as_deref() == Some(case.decisive_skill_id.as_str()))
                .unwrap();
            let question_tokens = crate::text::token_set(&case.question);
            let rule_tokens = crate::text::token_set(&decisive.rule);
            assert!(question_tokens.is_disjoint(&rule_tokens));
            // but it does share tokens with the transition
            assert!(!case.transition.head_tokens().is_disjoint(&rule_tokens));
        }
    }

    #[test]
    fn reranker_benchmark_shapes() {
        let bench = reranker_benchmark(20, 10);
        assert_eq!(bench.queries.len(), 20);
        // 20 golds + 10 hard queries x 6 distractors
        assert_eq!(bench.corpus.len(), 20 + 10 * DISTRACTORS_PER_QUERY);
        assert_eq!(bench.train.len(), 10);
        for triplet in &bench.train {
            assert_eq!(triplet.negatives.len(), DISTRACTORS_PER_QUERY);
        }
        // unique ids
        let mut ids: Vec<&str> = bench.corpus.iter().map(|d| d.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), bench.corpus.len());
    }

    #[test]
    fn audit_fixture_has_exactly_three_uncoupled() {
        let records = audit_fixture();
        assert_eq!(records.len(), 25);
        let uncoupled = records
            .iter()
            .filter(|r| !check_qa_coupling(&r.chain, &r.answer).coupled)
            .count();
        assert_eq!(uncoupled, 3);
    }

    #[test]
    fn case_study_fixture_is_well_formed() {
        let fixture = case_study_fixture();
        assert_eq!(fixture.benchmark[0].gold, "D");
        for record in &fixture.experience {
            assert!(check_qa_coupling(&record.chain, &record.answer).coupled);
        }
    }
}
