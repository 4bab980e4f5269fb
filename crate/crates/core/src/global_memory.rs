//! Global memory evolved phase by phase from users' updated profiles, at
//! population level or per community.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::community::{CommunityError, CommunityModel};
use crate::embedding::{cosine_similarity, EmbeddingError, EmbeddingProvider};
use crate::llm::{LlmClient, LlmError};
use crate::retrieval::tokenize;
use crate::template::{slots, PromptKind, TemplateError, NONE_MARKER};

pub const DEFAULT_MAX_ITEMS: usize = 20;
pub const DEFAULT_PROMPT_BUDGET: usize = 12_000;

#[derive(Debug, Error)]
pub enum GlobalError {
    #[error("phase has no profiles")]
    NoProfiles,
    #[error("LLM returned an empty global memory")]
    EmptyCompletion,
    #[error("memory has no phases")]
    NoPhases,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Community(#[from] CommunityError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("memory store {path}: {message}")]
    Store { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub index: usize,
    pub text: String,
    /// No profiles reached this memory in the phase; text carried forward.
    #[serde(default)]
    pub skipped: bool,
    /// Bullet lines in the completion.
    #[serde(default)]
    pub bullets: usize,
    /// Global-update calls the phase took.
    #[serde(default)]
    pub chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalMemoryState {
    pub community_id: Option<usize>,
    pub phases: Vec<PhaseEntry>,
}

impl GlobalMemoryState {
    /// Text of the latest phase, or the none marker before the first.
    pub fn current(&self) -> &str {
        self.phases.last().map_or(NONE_MARKER, |p| p.text.as_str())
    }

    fn push(mut self, text: String, skipped: bool, chunks: usize) -> Self {
        let bullets = count_bullets(&text);
        self.phases.push(PhaseEntry {
            index: self.phases.len(),
            text,
            skipped,
            bullets,
            chunks,
        });
        self
    }

    /// Carries the current text into a new phase unchanged.
    pub fn skip_phase(self) -> Self {
        let text = self.current().to_string();
        self.push(text, true, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalConfig {
    pub max_items: usize,
    /// Characters of personalized memories per global-update prompt.
    pub prompt_budget: usize,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            max_items: DEFAULT_MAX_ITEMS,
            prompt_budget: DEFAULT_PROMPT_BUDGET,
        }
    }
}

pub fn init_memory(community_id: Option<usize>) -> GlobalMemoryState {
    GlobalMemoryState {
        community_id,
        phases: Vec::new(),
    }
}

pub fn count_bullets(text: &str) -> usize {
    text.lines()
        .map(str::trim_start)
        .filter(|l| l.starts_with("- ") || l.starts_with("* "))
        .count()
}

fn render_block(user_id: &str, profile: &str) -> String {
    format!("User {user_id}:\n{}", profile.trim())
}

/// Groups user blocks into chunks of at most `budget` characters; a block
/// larger than the budget gets a chunk of its own.
fn chunk_blocks(blocks: Vec<String>, budget: usize) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut current = String::new();
    for block in blocks {
        if !current.is_empty() && current.len() + 1 + block.len() > budget {
            chunks.push(std::mem::take(&mut current));
        }
        if !current.is_empty() {
            current.push('\n');
        }
        current.push_str(&block);
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

/// One phase of the cumulative update. Profiles are presented ordered by
/// user id; when they exceed the prompt budget, the update runs once per
/// chunk and each chunk sees the latest memory.
pub fn evolve_phase(
    state: GlobalMemoryState,
    phase_profiles: &[(String, String)],
    llm: &LlmClient,
    config: GlobalConfig,
) -> Result<GlobalMemoryState, GlobalError> {
    if phase_profiles.is_empty() {
        return Err(GlobalError::NoProfiles);
    }
    let mut sorted: Vec<&(String, String)> = phase_profiles.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let blocks = sorted
        .into_iter()
        .map(|(u, p)| render_block(u, p))
        .collect();
    let chunks = chunk_blocks(blocks, config.prompt_budget);
    let template = llm.templates().get(PromptKind::GlobalUpdate);
    let max_items = config.max_items.to_string();

    let mut memory = state.current().to_string();
    for chunk in &chunks {
        let prompt = template.render(&[
            (slots::GLOBAL_MEMORY_PRIOR, &memory),
            (slots::PERSONAL_MEMORIES, chunk),
            (slots::MAX_ITEMS, &max_items),
        ])?;
        let completion = llm.complete(&prompt)?;
        let text = completion.trim();
        if text.is_empty() {
            return Err(GlobalError::EmptyCompletion);
        }
        memory = text.to_string();
    }
    Ok(state.push(memory, false, chunks.len()))
}

/// Evolves one memory per community (or a single population memory) over
/// the phases in order. `profiles_by_phase[t]` holds the profiles updated
/// in phase t.
pub fn evolve_all(
    profiles_by_phase: &[Vec<(String, String)>],
    llm: &LlmClient,
    config: GlobalConfig,
    model: Option<&CommunityModel>,
) -> Result<Vec<GlobalMemoryState>, GlobalError> {
    let Some(model) = model else {
        return Ok(vec![evolve_sequence(None, profiles_by_phase, llm, config)?]);
    };
    let mut split: Vec<Vec<Vec<(String, String)>>> =
        vec![vec![Vec::new(); profiles_by_phase.len()]; model.k];
    for (t, phase) in profiles_by_phase.iter().enumerate() {
        for (user, profile) in phase {
            split[model.community_of(user)?][t].push((user.clone(), profile.clone()));
        }
    }
    split
        .into_par_iter()
        .enumerate()
        .map(|(c, phases)| evolve_sequence(Some(c), &phases, llm, config))
        .collect()
}

fn evolve_sequence(
    community_id: Option<usize>,
    phases: &[Vec<(String, String)>],
    llm: &LlmClient,
    config: GlobalConfig,
) -> Result<GlobalMemoryState, GlobalError> {
    let mut state = init_memory(community_id);
    for profiles in phases {
        state = if profiles.is_empty() {
            state.skip_phase()
        } else {
            evolve_phase(state, profiles, llm, config)?
        };
    }
    Ok(state)
}

/// Pairwise cosine similarity of the phase texts' embeddings.
pub fn phase_similarity(
    state: &GlobalMemoryState,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<Vec<f64>>, GlobalError> {
    if state.phases.is_empty() {
        return Err(GlobalError::NoPhases);
    }
    let embedded = state
        .phases
        .iter()
        .map(|p| provider.embed(&p.text))
        .collect::<Result<Vec<_>, _>>()?;
    let n = embedded.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        // signed hashing can cancel a short text to the zero vector; a text
        // with tokens is still identical to itself
        m[i][i] = if tokenize(&state.phases[i].text).is_empty() {
            0.0
        } else {
            1.0
        };
        for j in i + 1..n {
            let s = cosine_similarity(&embedded[i], &embedded[j])?;
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    Ok(m)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    community_id: Option<usize>,
    phases: Vec<usize>,
    #[serde(default)]
    skipped: Vec<usize>,
    #[serde(default)]
    bullets: Vec<usize>,
    #[serde(default)]
    chunks: Vec<usize>,
}

/// Writes `phase_<t>.txt` per phase plus `manifest.json`.
pub fn save_memory(state: &GlobalMemoryState, dir: &Path) -> Result<(), GlobalError> {
    let store = |e: String| GlobalError::Store {
        path: dir.display().to_string(),
        message: e,
    };
    std::fs::create_dir_all(dir).map_err(|e| store(e.to_string()))?;
    for p in &state.phases {
        std::fs::write(dir.join(format!("phase_{}.txt", p.index)), &p.text)
            .map_err(|e| store(e.to_string()))?;
    }
    let manifest = Manifest {
        community_id: state.community_id,
        phases: state.phases.iter().map(|p| p.index).collect(),
        skipped: state
            .phases
            .iter()
            .filter(|p| p.skipped)
            .map(|p| p.index)
            .collect(),
        bullets: state.phases.iter().map(|p| p.bullets).collect(),
        chunks: state.phases.iter().map(|p| p.chunks).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| store(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), json).map_err(|e| store(e.to_string()))
}

pub fn load_memory(dir: &Path) -> Result<GlobalMemoryState, GlobalError> {
    let store = |e: String| GlobalError::Store {
        path: dir.display().to_string(),
        message: e,
    };
    let text =
        std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| store(e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| store(e.to_string()))?;
    let mut phases = Vec::new();
    for (i, &t) in manifest.phases.iter().enumerate() {
        let text = std::fs::read_to_string(dir.join(format!("phase_{t}.txt")))
            .map_err(|e| store(e.to_string()))?;
        phases.push(PhaseEntry {
            index: t,
            skipped: manifest.skipped.contains(&t),
            bullets: manifest
                .bullets
                .get(i)
                .copied()
                .unwrap_or_else(|| count_bullets(&text)),
            chunks: manifest.chunks.get(i).copied().unwrap_or(1),
            text,
        });
    }
    Ok(GlobalMemoryState {
        community_id: manifest.community_id,
        phases,
    })
}

/// Memory directories keyed by name: `population` or `community_<c>`.
pub fn memory_dir_name(state: &GlobalMemoryState) -> String {
    match state.community_id {
        Some(c) => format!("community_{c}"),
        None => "population".to_string(),
    }
}

/// Loads every memory saved under `root` by [`memory_dir_name`].
pub fn load_all(root: &Path) -> Result<BTreeMap<String, GlobalMemoryState>, GlobalError> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(root).map_err(|e| GlobalError::Store {
        path: root.display().to_string(),
        message: e.to_string(),
    })?;
    for entry in entries.flatten() {
        if entry.path().join("manifest.json").exists() {
            out.insert(
                entry.file_name().to_string_lossy().into_owned(),
                load_memory(&entry.path())?,
            );
        }
    }
    Ok(out)
}
