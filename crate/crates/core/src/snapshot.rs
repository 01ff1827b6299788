//! Reproducible build artifacts: a snapshot directory holding the two
//! libraries, the model, the optional reranker, the effective config, and a
//! manifest with content hashes. Loading verifies the version and every
//! hash; a newer snapshot version fails loudly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::EngineConfig;
use crate::experience::ExperienceLibrary;
use crate::ingest::{export_experience, export_skills, ingest_experience, ingest_skills};
use crate::model::{ModelParams, Vocab};
use crate::pipeline::Engine;
use crate::rerank::RerankerParams;
use crate::skills::{hex_string, SkillLibrary};

pub const SNAPSHOT_VERSION: u32 = 1;

pub const SKILLS_FILE: &str = "skills.jsonl";
pub const EXPERIENCE_FILE: &str = "experience.jsonl";
pub const MODEL_FILE: &str = "model.json";
pub const RERANKER_FILE: &str = "reranker.json";
pub const CONFIG_FILE: &str = "config.cfg";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("snapshot io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("snapshot version {found} is newer than supported version {supported}")]
    VersionTooNew { found: u32, supported: u32 },
    #[error("content hash mismatch for {file}; snapshot is corrupt or was edited")]
    HashMismatch { file: String },
    #[error("snapshot is missing {file}")]
    MissingFile { file: String },
    #[error("snapshot is corrupt: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub snapshot_version: u32,
    /// file name -> sha256 hex of the file bytes.
    pub files: BTreeMap<String, String>,
    pub counts: BTreeMap<String, u64>,
    pub config_hash: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex_string(&hasher.finalize())
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<String, SnapshotError> {
    let path = dir.join(name);
    fs::write(&path, content).map_err(|source| SnapshotError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(sha256_hex(content.as_bytes()))
}

fn read_file(dir: &Path, name: &str) -> Result<String, SnapshotError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(SnapshotError::MissingFile { file: name.into() });
    }
    fs::read_to_string(&path).map_err(|source| SnapshotError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes the engine's state as a snapshot directory and returns the
/// manifest. The directory is created if needed.
pub fn save_snapshot(dir: impl AsRef<Path>, engine: &Engine) -> Result<Manifest, SnapshotError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| SnapshotError::Io {
        path: dir.display().to_string(),
        source,
    })?;

    let mut files = BTreeMap::new();
    files.insert(
        SKILLS_FILE.to_string(),
        write_file(dir, SKILLS_FILE, &export_skills(engine.skills()))?,
    );
    files.insert(
        EXPERIENCE_FILE.to_string(),
        write_file(
            dir,
            EXPERIENCE_FILE,
            &export_experience(engine.experience()),
        )?,
    );
    files.insert(
        MODEL_FILE.to_string(),
        write_file(dir, MODEL_FILE, &engine.model().to_snapshot_json())?,
    );
    if let Some(reranker) = engine.reranker() {
        files.insert(
            RERANKER_FILE.to_string(),
            write_file(dir, RERANKER_FILE, &reranker.to_json())?,
        );
    }
    files.insert(
        CONFIG_FILE.to_string(),
        write_file(dir, CONFIG_FILE, &engine.config().render())?,
    );

    let mut counts = BTreeMap::new();
    counts.insert("skills".into(), engine.skills().len() as u64);
    counts.insert("experience".into(), engine.experience().len() as u64);
    counts.insert("vocab".into(), engine.model().vocab().size() as u64);

    let manifest = Manifest {
        snapshot_version: SNAPSHOT_VERSION,
        files,
        counts,
        config_hash: engine.config().content_hash(),
    };
    write_file(
        dir,
        MANIFEST_FILE,
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

/// Loads and verifies a snapshot directory back into an engine.
pub fn load_snapshot(dir: impl AsRef<Path>) -> Result<Engine, SnapshotError> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&read_file(dir, MANIFEST_FILE)?)
        .map_err(|e| SnapshotError::Corrupt(format!("manifest: {e}")))?;
    if manifest.snapshot_version > SNAPSHOT_VERSION {
        return Err(SnapshotError::VersionTooNew {
            found: manifest.snapshot_version,
            supported: SNAPSHOT_VERSION,
        });
    }
    for (file, expected) in &manifest.files {
        let content = read_file(dir, file)?;
        let actual = sha256_hex(content.as_bytes());
        if &actual != expected {
            return Err(SnapshotError::HashMismatch { file: file.clone() });
        }
    }

    let config = EngineConfig::parse(&read_file(dir, CONFIG_FILE)?)
        .map_err(|e| SnapshotError::Corrupt(format!("config: {e}")))?;

    let mut experience = ExperienceLibrary::new().with_strict(config.strict);
    let report = ingest_experience(dir.join(EXPERIENCE_FILE), &mut experience)
        .map_err(|e| SnapshotError::Corrupt(format!("experience: {e}")))?;
    if report.rejected > 0 {
        return Err(SnapshotError::Corrupt(format!(
            "experience export re-ingested with {} rejected lines",
            report.rejected
        )));
    }

    let mut skills = SkillLibrary::new();
    ingest_skills(dir.join(SKILLS_FILE), &mut skills)
        .map_err(|e| SnapshotError::Corrupt(format!("skills: {e}")))?;

    let mut model = ModelParams::from_snapshot_json(&read_file(dir, MODEL_FILE)?)
        .map_err(|e| SnapshotError::Corrupt(e.to_string()))?;
    if config.anchor_fallback {
        model.refresh_anchor_fallback(&experience);
    } else {
        model.set_anchor_fallback(None);
    }

    let reranker = if manifest.files.contains_key(RERANKER_FILE) {
        Some(
            RerankerParams::from_json(&read_file(dir, RERANKER_FILE)?)
                .map_err(|e| SnapshotError::Corrupt(e.to_string()))?,
        )
    } else {
        None
    };

    Engine::new(skills, experience, model, reranker, config)
        .map_err(|e| SnapshotError::Corrupt(e.to_string()))
}

/// Builds an engine from freshly ingested libraries: freezes them, derives
/// the model vocabulary from the experience chains, and applies the anchor
/// policy from the config.
pub fn assemble_engine(
    skills: SkillLibrary,
    experience: ExperienceLibrary,
    reranker: Option<RerankerParams<f64>>,
    config: EngineConfig,
) -> Result<Engine, crate::pipeline::PipelineError> {
    let mut model = if experience.is_empty() {
        ModelParams::uniform(Vocab::from_states(Vec::<String>::new()))
    } else {
        ModelParams::from_library(&experience)?
    };
    if !config.anchor_fallback {
        model.set_anchor_fallback(None);
    }
    Engine::new(skills, experience, model, reranker, config)
}
