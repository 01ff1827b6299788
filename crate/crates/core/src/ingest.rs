//! Streaming JSONL ingestion for the four record kinds, plus canonical
//! library export. Malformed lines are skipped with a per-line diagnostic;
//! a file whose first lines mostly fail the kind's schema is rejected
//! outright as the wrong kind.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::LogicalChain;
use crate::eval::BenchmarkItem;
use crate::experience::{ExperienceLibrary, NewExperience};
use crate::library::AddOutcome;
use crate::rerank::TrainingTriplet;
use crate::skills::{SkillLibrary, SkillRule};

/// Lines inspected for the wrong-kind sniff test.
const SNIFF_LINES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestKind {
    Experience,
    Skills,
    Benchmark,
    Triplets,
}

impl std::fmt::Display for IngestKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            IngestKind::Experience => "experience",
            IngestKind::Skills => "skills",
            IngestKind::Benchmark => "benchmark",
            IngestKind::Triplets => "triplets",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} does not look like {kind} records ({mismatched} of the first {inspected} lines fail the schema)")]
    WrongKind {
        path: String,
        kind: IngestKind,
        mismatched: usize,
        inspected: usize,
    },
}

/// Counts from one ingestion pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub kind: IngestKind,
    pub accepted: usize,
    pub rejected: usize,
    pub deduplicated: usize,
    /// One message per rejected or skipped line.
    pub diagnostics: Vec<String>,
}

impl IngestReport {
    fn new(kind: IngestKind) -> Self {
        Self {
            kind,
            accepted: 0,
            rejected: 0,
            deduplicated: 0,
            diagnostics: Vec::new(),
        }
    }
}

/// JSONL experience record. The chain may be an arrow string or an array of
/// state strings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperienceRecord {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub id: Option<String>,
    pub question: String,
    #[serde(default)]
    pub context: Option<String>,
    pub answer: String,
    #[serde(deserialize_with = "crate::chain::deserialize_flexible")]
    pub chain: LogicalChain,
}

/// JSONL skill record; provenance (`source`) is stored opaquely.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkillRecord {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub id: Option<String>,
    pub evidence: String,
    pub rule: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source: Option<String>,
}

fn read_lines(path: &Path) -> Result<Vec<String>, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::FileUnreadable {
        path: path.display().to_string(),
        source,
    })?;
    BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|source| IngestError::FileUnreadable {
            path: path.display().to_string(),
            source,
        })
}

fn sniff<T: for<'de> Deserialize<'de>>(
    path: &Path,
    lines: &[String],
    kind: IngestKind,
) -> Result<(), IngestError> {
    let sample: Vec<&String> = lines
        .iter()
        .filter(|l| !l.trim().is_empty())
        .take(SNIFF_LINES)
        .collect();
    if sample.is_empty() {
        return Ok(());
    }
    let mismatched = sample
        .iter()
        .filter(|l| serde_json::from_str::<T>(l).is_err())
        .count();
    if mismatched * 2 > sample.len() {
        return Err(IngestError::WrongKind {
            path: path.display().to_string(),
            kind,
            mismatched,
            inspected: sample.len(),
        });
    }
    Ok(())
}

fn record_outcome(report: &mut IngestReport, line_no: usize, outcome: AddOutcome) {
    match outcome {
        AddOutcome::Added(_) => report.accepted += 1,
        AddOutcome::Duplicate(id) => {
            report.deduplicated += 1;
            report
                .diagnostics
                .push(format!("line {line_no}: duplicate of {id}"));
        }
        AddOutcome::Rejected { reason } => {
            report.rejected += 1;
            report.diagnostics.push(format!("line {line_no}: {reason}"));
        }
    }
}

/// Streams experience records into the library.
pub fn ingest_experience(
    path: impl AsRef<Path>,
    library: &mut ExperienceLibrary,
) -> Result<IngestReport, IngestError> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    sniff::<ExperienceRecord>(path, &lines, IngestKind::Experience)?;
    let mut report = IngestReport::new(IngestKind::Experience);
    for (i, line) in lines.iter().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ExperienceRecord>(line) {
            Ok(record) => match library.add(NewExperience {
                id: record.id,
                question: record.question,
                context: record.context,
                answer: record.answer,
                chain: record.chain,
            }) {
                Ok(outcome) => record_outcome(&mut report, line_no, outcome),
                Err(err) => {
                    report.rejected += 1;
                    report.diagnostics.push(format!("line {line_no}: {err}"));
                }
            },
            Err(err) => {
                report.rejected += 1;
                report.diagnostics.push(format!("line {line_no}: {err}"));
            }
        }
    }
    Ok(report)
}

/// Streams skill records into the library.
pub fn ingest_skills(
    path: impl AsRef<Path>,
    library: &mut SkillLibrary,
) -> Result<IngestReport, IngestError> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    sniff::<SkillRecord>(path, &lines, IngestKind::Skills)?;
    let mut report = IngestReport::new(IngestKind::Skills);
    for (i, line) in lines.iter().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record = match serde_json::from_str::<SkillRecord>(line) {
            Ok(record) => record,
            Err(err) => {
                report.rejected += 1;
                report.diagnostics.push(format!("line {line_no}: {err}"));
                continue;
            }
        };
        let rule = match SkillRule::parse(&record.evidence, &record.rule) {
            Ok(rule) => {
                let rule = match record.id {
                    Some(id) => rule.with_id(id),
                    None => rule,
                };
                match record.source {
                    Some(source) => rule.with_source(source),
                    None => rule,
                }
            }
            Err(err) => {
                report.rejected += 1;
                report.diagnostics.push(format!("line {line_no}: {err}"));
                continue;
            }
        };
        match library.add(rule) {
            Ok(outcome) => record_outcome(&mut report, line_no, outcome),
            Err(err) => {
                report.rejected += 1;
                report.diagnostics.push(format!("line {line_no}: {err}"));
            }
        }
    }
    Ok(report)
}

/// Reads a benchmark file; duplicate ids are rejected lines.
pub fn read_benchmark(
    path: impl AsRef<Path>,
) -> Result<(Vec<BenchmarkItem>, IngestReport), IngestError> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    sniff::<BenchmarkItem>(path, &lines, IngestKind::Benchmark)?;
    let mut report = IngestReport::new(IngestKind::Benchmark);
    let mut items: Vec<BenchmarkItem> = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (i, line) in lines.iter().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<BenchmarkItem>(line) {
            Ok(item) => {
                if item.options.is_empty() {
                    report.rejected += 1;
                    report
                        .diagnostics
                        .push(format!("line {line_no}: no options"));
                } else if seen.contains_key(&item.id) {
                    report.deduplicated += 1;
                    report
                        .diagnostics
                        .push(format!("line {line_no}: duplicate id {}", item.id));
                } else {
                    seen.insert(item.id.clone(), items.len());
                    items.push(item);
                    report.accepted += 1;
                }
            }
            Err(err) => {
                report.rejected += 1;
                report.diagnostics.push(format!("line {line_no}: {err}"));
            }
        }
    }
    Ok((items, report))
}

/// Reads a reranker training file.
pub fn read_triplets(
    path: impl AsRef<Path>,
) -> Result<(Vec<TrainingTriplet>, IngestReport), IngestError> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    sniff::<TrainingTriplet>(path, &lines, IngestKind::Triplets)?;
    let mut report = IngestReport::new(IngestKind::Triplets);
    let mut triplets = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrainingTriplet>(line) {
            Ok(triplet) if triplet.negatives.is_empty() => {
                report.rejected += 1;
                report
                    .diagnostics
                    .push(format!("line {line_no}: triplet has no negatives"));
            }
            Ok(triplet) => {
                triplets.push(triplet);
                report.accepted += 1;
            }
            Err(err) => {
                report.rejected += 1;
                report.diagnostics.push(format!("line {line_no}: {err}"));
            }
        }
    }
    Ok((triplets, report))
}

/// Canonical JSONL export (sorted by id); `ingest_experience` inverts it.
pub fn export_experience(library: &ExperienceLibrary) -> String {
    let mut items: Vec<_> = library.items().collect();
    items.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = String::new();
    for item in items {
        let record = ExperienceRecord {
            id: Some(item.id.clone()),
            question: item.question.clone(),
            context: item.context.clone(),
            answer: item.answer.clone(),
            chain: item.chain.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Canonical JSONL export (sorted by id); `ingest_skills` inverts it.
pub fn export_skills(library: &SkillLibrary) -> String {
    let mut rules: Vec<_> = library.iter().collect();
    rules.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = String::new();
    for rule in rules {
        let record = SkillRecord {
            id: Some(rule.id.clone()),
            evidence: rule.evidence.clone(),
            rule: rule.rule_text(),
            source: rule.source.clone(),
        };
        out.push_str(&serde_json::to_string(&record).expect("record serializes"));
        out.push('\n');
    }
    out
}
