//! Regenerates the shipped fixture files under `fixtures/` at the workspace
//! root. Generation is fully deterministic, so reruns are byte-identical.
//!
//! ```text
//! cargo run -p stepchain-core --example gen_fixtures
//! ```

use std::fs;
use std::path::PathBuf;

use stepchain_core::synth::{
    audit_fixture, case_study_fixture, gated_benchmark, reranker_benchmark, to_jsonl,
};

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    fs::create_dir_all(&dir)?;

    let gated = gated_benchmark(40);
    fs::write(
        dir.join("gated_experience.jsonl"),
        to_jsonl(&gated.experience),
    )?;
    fs::write(dir.join("gated_skills.jsonl"), to_jsonl(&gated.skills))?;
    fs::write(
        dir.join("gated_benchmark.jsonl"),
        to_jsonl(&gated.benchmark),
    )?;

    let case = case_study_fixture();
    fs::write(
        dir.join("case_experience.jsonl"),
        to_jsonl(&case.experience),
    )?;
    fs::write(dir.join("case_skills.jsonl"), to_jsonl(&case.skills))?;
    fs::write(dir.join("case_benchmark.jsonl"), to_jsonl(&case.benchmark))?;

    fs::write(
        dir.join("audit_experience.jsonl"),
        to_jsonl(&audit_fixture()),
    )?;

    let retrieval = reranker_benchmark(220, 150);
    fs::write(
        dir.join("retrieval_corpus.jsonl"),
        to_jsonl(&retrieval.corpus),
    )?;
    fs::write(
        dir.join("retrieval_queries.jsonl"),
        to_jsonl(&retrieval.queries),
    )?;
    fs::write(
        dir.join("retrieval_triplets.jsonl"),
        to_jsonl(&retrieval.train),
    )?;

    fs::write(
        dir.join("engine.cfg"),
        "# engine defaults, spelled out\nm = 4\nk = 5\ntau = 0.2\nn = 5\neta = 0.1\n",
    )?;

    println!("fixtures written to {}", dir.display());
    Ok(())
}
