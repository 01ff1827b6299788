//! Subcommand implementations. The search/info builders are shared with the
//! HTTP service so both surfaces emit identical JSON.

use std::collections::BTreeMap;
use std::fs;

use anyhow::Context;
use serde_json::{json, Value};

use stepchain_core::eval::{run_ablation, standard_masks};
use stepchain_core::ingest::{ingest_experience, ingest_skills, read_benchmark, read_triplets};
use stepchain_core::pipeline::{ComponentMask, Engine};
use stepchain_core::rerank::train_reranker as train_reranker_impl;
use stepchain_core::retrieval::{
    retrieve_experience, retrieve_skills_by_question, RetrievalConfig,
};
use stepchain_core::snapshot::{assemble_engine, load_snapshot, save_snapshot};
use stepchain_core::{EngineConfig, ExperienceLibrary, Query, Reranker, SkillLibrary};

use crate::{AuditArgs, BuildArgs, EvalArgs, InfoArgs, RunArgs, SearchArgs, TrainArgs};

/// Schema version stamped on search/info/health responses.
pub const SCHEMA_VERSION: u32 = 1;

pub fn build(args: BuildArgs) -> anyhow::Result<()> {
    let config = match &args.config {
        Some(path) => EngineConfig::parse(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => EngineConfig::default(),
    };
    let mut experience = ExperienceLibrary::new().with_strict(config.strict);
    let experience_report = ingest_experience(&args.experience, &mut experience)?;
    let mut skills = SkillLibrary::new();
    let skills_report = ingest_skills(&args.skills, &mut skills)?;
    let reranker = match &args.reranker {
        Some(path) => Some(Reranker::from_json(
            &fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        )?),
        None => None,
    };
    let engine = assemble_engine(skills, experience, reranker, config)?;
    let manifest = save_snapshot(&args.out, &engine)?;
    for line in experience_report
        .diagnostics
        .iter()
        .chain(skills_report.diagnostics.iter())
    {
        eprintln!("{line}");
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "snapshot": args.out.display().to_string(),
            "manifest": manifest,
            "ingest": {
                "experience": experience_report,
                "skills": skills_report,
            },
        }))?
    );
    Ok(())
}

pub fn run(args: RunArgs) -> anyhow::Result<()> {
    let engine = load_snapshot(&args.snapshot)?;
    let options: Option<BTreeMap<String, String>> = match &args.options {
        Some(text) => Some(serde_json::from_str(text).context("parsing --options JSON")?),
        None => None,
    };
    let query = Query {
        question: args.question,
        context: args.context,
        options,
    };
    let bundle = engine.run(&query)?;
    println!("{}", bundle.to_json());
    Ok(())
}

pub fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let mut engine = load_snapshot(&args.snapshot)?;
    engine.set_seed(args.seed);
    let (benchmark, ingest_report) = read_benchmark(&args.benchmark)?;
    for line in &ingest_report.diagnostics {
        eprintln!("{line}");
    }
    let masks = if args.ablation {
        standard_masks()
    } else {
        vec![("full".to_string(), ComponentMask::FULL)]
    };
    let report = run_ablation(&benchmark, &engine, &masks, args.timings, args.bundles)?;
    println!("{}", report.to_json());
    eprint!("{}", report.summary());
    Ok(())
}

pub fn train_reranker(args: TrainArgs) -> anyhow::Result<()> {
    let (triplets, ingest_report) = read_triplets(&args.triplets)?;
    for line in &ingest_report.diagnostics {
        eprintln!("{line}");
    }
    let outcome = train_reranker_impl::<f64>(&triplets, args.epochs, args.lr, args.seed)?;
    fs::write(&args.out, outcome.params.to_json())
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "triplets": triplets.len(),
            "epochs": args.epochs,
            "initial_loss": outcome.initial_loss,
            "final_loss": outcome.final_loss,
            "out": args.out.display().to_string(),
        }))?
    );
    Ok(())
}

pub fn audit(args: AuditArgs) -> anyhow::Result<()> {
    let engine = load_snapshot(&args.snapshot)?;
    let sample = args.sample.unwrap_or_else(|| engine.experience().len());
    let report = engine.experience().audit(sample, args.seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn search(args: SearchArgs) -> anyhow::Result<()> {
    let engine = load_snapshot(&args.snapshot)?;
    let value = match args.kind.as_str() {
        "skills" => search_skills_value(&engine, &args.query, args.limit)?,
        _ => search_experience_value(&engine, &args.query, args.limit)?,
    };
    println!("{}", serde_json::to_string_pretty(&value)?);
    Ok(())
}

pub fn info(args: InfoArgs) -> anyhow::Result<()> {
    let engine = load_snapshot(&args.snapshot)?;
    println!("{}", serde_json::to_string_pretty(&health_value(&engine))?);
    Ok(())
}

pub fn search_skills_value(
    engine: &Engine,
    query: &str,
    limit: Option<usize>,
) -> anyhow::Result<Value> {
    let config = RetrievalConfig {
        k: limit.unwrap_or(engine.config().retrieval.k),
        ..engine.config().retrieval
    };
    let hits = retrieve_skills_by_question(query, "", engine.skills(), &config, engine.reranker())?;
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "kind": "skills",
        "query": query,
        "results": hits
            .iter()
            .map(|(rule, score)| json!({
                "id": rule.id,
                "rule": rule.rule_text(),
                "evidence": rule.evidence,
                "score": score,
            }))
            .collect::<Vec<_>>(),
    }))
}

pub fn search_experience_value(
    engine: &Engine,
    query: &str,
    limit: Option<usize>,
) -> anyhow::Result<Value> {
    let config = RetrievalConfig {
        m: limit.unwrap_or(engine.config().retrieval.m),
        ..engine.config().retrieval
    };
    let hits = retrieve_experience(query, "", engine.experience(), &config, engine.reranker())?;
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "kind": "experience",
        "query": query,
        "results": hits
            .iter()
            .map(|hit| json!({
                "id": hit.item.id,
                "question": hit.item.question,
                "answer": hit.item.answer,
                "chain": hit.item.chain.to_text(),
                "score": hit.score,
            }))
            .collect::<Vec<_>>(),
    }))
}

pub fn health_value(engine: &Engine) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "status": "ok",
        "skills": engine.skills().len(),
        "experience": engine.experience().len(),
        "vocab": engine.model().vocab().size(),
        "config_hash": engine.config().content_hash(),
    })
}
