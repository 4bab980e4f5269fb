//! Mediator: fuses local memory, global memory, and the query into one
//! prompt, then post-processes the completion per task.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::community::{CommunityError, CommunityModel};
use crate::dataset::{InteractionRecord, TaskKind, UserHistory};
use crate::embedding::{concat, EmbeddingError, EmbeddingProvider, EmbeddingVector};
use crate::llm::{LlmClient, LlmError};
use crate::profile::{build_profile_vector, render_record, ProfileError};
use crate::retrieval::{build_index, tokenize, Bm25Params, Document};
use crate::template::{
    slots, PromptKind, TemplateError, TemplateSet, INSTRUCTION_SEPARATOR, NONE_MARKER,
};

#[derive(Debug, Error)]
pub enum MediatorError {
    #[error("k_retrieve must be at least 1 for retrieval modes")]
    ZeroK,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Community(#[from] CommunityError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("community routing needs {0} community memories, got {1}")]
    MissingCommunity(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMode {
    None,
    #[default]
    Rag,
    Profile,
    Hybrid,
}

impl LocalMode {
    pub fn retrieves(self) -> bool {
        matches!(self, LocalMode::Rag | LocalMode::Hybrid)
    }

    pub fn uses_profile(self) -> bool {
        matches!(self, LocalMode::Profile | LocalMode::Hybrid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub local_mode: LocalMode,
    pub use_global: bool,
    pub k_retrieve: usize,
    pub community_routing: bool,
    pub template_id: String,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            local_mode: LocalMode::Rag,
            use_global: true,
            k_retrieve: 1,
            community_routing: false,
            template_id: "generic".into(),
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), MediatorError> {
        if self.local_mode.retrieves() && self.k_retrieve == 0 {
            return Err(MediatorError::ZeroK);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalMemoryBundle {
    pub mode: LocalMode,
    /// Rendered records, most relevant first.
    pub retrieved: Vec<String>,
    pub profile_text: Option<String>,
    /// The user had no history before the query.
    pub cold_start: bool,
}

impl LocalMemoryBundle {
    pub fn is_empty(&self) -> bool {
        self.retrieved.is_empty()
            && self
                .profile_text
                .as_deref()
                .is_none_or(|p| p.trim().is_empty())
    }

    /// Text for the local-memory slot.
    pub fn render(&self) -> String {
        if self.is_empty() {
            return NONE_MARKER.to_string();
        }
        let records = self.retrieved.join("\n");
        match (&self.profile_text, self.retrieved.is_empty()) {
            (Some(p), false) => format!("Profile:\n{p}\nRelevant past interactions:\n{records}"),
            (Some(p), true) => p.clone(),
            (None, _) => records,
        }
    }
}

/// Local memory for `query`, built only from history strictly before it.
pub fn build_local_memory(
    history: &UserHistory,
    query: &InteractionRecord,
    config: &InferenceConfig,
    profile: Option<&str>,
) -> LocalMemoryBundle {
    let past = history.before(query.timestamp);
    let mut bundle = LocalMemoryBundle {
        mode: config.local_mode,
        retrieved: Vec::new(),
        profile_text: None,
        cold_start: past.is_empty(),
    };
    if config.local_mode.retrieves() && !past.is_empty() {
        let docs: Vec<Document> = past.iter().map(Document::from_record).collect();
        if let Ok(index) = build_index(&docs, Bm25Params::default()) {
            bundle.retrieved = index
                .top_k(&query.query, config.k_retrieve)
                .into_iter()
                .filter_map(|hit| past.iter().find(|r| r.record_id == hit.doc_id))
                .map(render_record)
                .collect();
        }
    }
    if config.local_mode.uses_profile() {
        bundle.profile_text = profile.filter(|p| !p.trim().is_empty()).map(str::to_string);
    }
    bundle
}

fn format_number(x: f64) -> String {
    format!("{x}")
}

/// The task's instruction block.
pub fn render_instruction(
    templates: &TemplateSet,
    task: &TaskKind,
) -> Result<String, TemplateError> {
    match task {
        TaskKind::Classification { labels } => templates
            .get(PromptKind::InstructClassification)
            .render(&[(slots::LABELS, &labels.join(", "))]),
        TaskKind::Regression { min, max } => {
            templates.get(PromptKind::InstructRegression).render(&[
                (slots::MIN, &format_number(*min)),
                (slots::MAX, &format_number(*max)),
            ])
        }
        TaskKind::Generation => templates.get(PromptKind::InstructGeneration).render(&[]),
    }
}

pub fn build_mediator_prompt(
    query: &str,
    local: &LocalMemoryBundle,
    global_text: Option<&str>,
    templates: &TemplateSet,
    task: &TaskKind,
) -> Result<String, TemplateError> {
    let local_text = local.render();
    let global_text = global_text
        .filter(|g| !g.trim().is_empty())
        .unwrap_or(NONE_MARKER);
    let body = templates.get(PromptKind::Mediator).render(&[
        (slots::LOCAL_MEMORY, &local_text),
        (slots::GLOBAL_MEMORY, global_text),
        (slots::QUERY, query),
    ])?;
    Ok(format!(
        "{body}{INSTRUCTION_SEPARATOR}{}",
        render_instruction(templates, task)?
    ))
}

/// Serving memories: one population text or one text per community.
#[derive(Clone)]
pub struct GlobalMemories {
    pub population: Option<String>,
    pub communities: Vec<String>,
    pub model: Option<CommunityModel>,
    pub provider: Arc<dyn EmbeddingProvider>,
}

impl GlobalMemories {
    pub fn population(text: impl Into<String>, provider: Arc<dyn EmbeddingProvider>) -> Self {
        Self {
            population: Some(text.into()),
            communities: Vec::new(),
            model: None,
            provider,
        }
    }

    /// Routing vector: ρ_u over the visible history, or for a cold-start
    /// user the query embedding paired with a zero response half.
    pub fn routing_vector(
        &self,
        history: &[InteractionRecord],
        query: &str,
    ) -> Result<EmbeddingVector, MediatorError> {
        if history.is_empty() {
            let q = self.provider.embed(query)?;
            let zeros = EmbeddingVector::zeros(q.dimension());
            return Ok(concat(&q, &zeros));
        }
        let h = UserHistory::new("", history.to_vec());
        Ok(build_profile_vector(&h, self.provider.as_ref())?)
    }

    /// Memory text serving this query, or `None` when no global memory is used.
    pub fn select(
        &self,
        history: &[InteractionRecord],
        query: &str,
        config: &InferenceConfig,
    ) -> Result<Option<(Option<usize>, &str)>, MediatorError> {
        if !config.use_global {
            return Ok(None);
        }
        if config.community_routing {
            if let Some(model) = &self.model {
                let c = model.assign(&self.routing_vector(history, query)?)?;
                let text = self
                    .communities
                    .get(c)
                    .ok_or(MediatorError::MissingCommunity(
                        model.k,
                        self.communities.len(),
                    ))?;
                return Ok(Some((Some(c), text)));
            }
        }
        Ok(self.population.as_deref().map(|t| (None, t)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutcome {
    pub record_id: String,
    pub user_id: String,
    pub prediction: String,
    pub gold: String,
    /// The completion yielded a usable answer for the task.
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub community: Option<usize>,
    /// Wall-clock time; kept out of persisted outcomes so reruns match byte for byte.
    #[serde(skip)]
    pub latency_ms: f64,
}

/// Earliest label mention in the completion (case-insensitive, whole
/// tokens); the longer label wins when two start at the same token.
pub fn extract_label(completion: &str, labels: &[String]) -> Option<String> {
    let tokens = tokenize(completion);
    let mut best: Option<(usize, usize, &String)> = None;
    for label in labels {
        let lt = tokenize(label);
        if lt.is_empty() || lt.len() > tokens.len() {
            continue;
        }
        if let Some(pos) = tokens.windows(lt.len()).position(|w| w == lt.as_slice()) {
            let better = match best {
                None => true,
                Some((p, len, _)) => pos < p || (pos == p && lt.len() > len),
            };
            if better {
                best = Some((pos, lt.len(), label));
            }
        }
    }
    best.map(|(_, _, l)| l.clone())
}

/// First number in the completion.
pub fn extract_number(completion: &str) -> Option<f64> {
    let bytes = completion.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        if bytes[i] == b'-' || bytes[i] == b'+' {
            i += 1;
        }
        let digits_start = i;
        while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
            i += 1;
        }
        if i > digits_start {
            let text = completion[start..i].trim_end_matches('.');
            if let Ok(v) = text.parse::<f64>() {
                if v.is_finite() {
                    return Some(v);
                }
            }
        }
        i = i.max(start + 1);
    }
    None
}

/// Task-specific post-processing: `(prediction, valid)`.
pub fn postprocess(completion: &str, task: &TaskKind) -> (String, bool) {
    let trimmed = completion.trim();
    match task {
        TaskKind::Classification { labels } => match extract_label(trimmed, labels) {
            Some(l) => (l, true),
            None => (trimmed.to_string(), false),
        },
        TaskKind::Regression { .. } => match extract_number(trimmed) {
            Some(v) => (format_number(v), true),
            None => (trimmed.to_string(), false),
        },
        TaskKind::Generation => (trimmed.to_string(), !trimmed.is_empty()),
    }
}

/// Everything `infer` needs besides the query.
pub struct InferenceContext<'a> {
    pub config: &'a InferenceConfig,
    pub task: &'a TaskKind,
    pub memories: &'a GlobalMemories,
    pub llm: &'a LlmClient,
}

/// Renders the full mediator prompt for one query.
pub fn prepare_prompt(
    query: &InteractionRecord,
    history: &UserHistory,
    profile: Option<&str>,
    ctx: &InferenceContext<'_>,
) -> Result<(String, Option<usize>), MediatorError> {
    ctx.config.validate()?;
    let local = build_local_memory(history, query, ctx.config, profile);
    let past = history.before(query.timestamp);
    let selected = ctx.memories.select(past, &query.query, ctx.config)?;
    let (community, global) = match selected {
        Some((c, text)) => (c, Some(text)),
        None => (None, None),
    };
    let prompt =
        build_mediator_prompt(&query.query, &local, global, ctx.llm.templates(), ctx.task)?;
    Ok((prompt, community))
}

pub fn infer(
    query: &InteractionRecord,
    history: &UserHistory,
    profile: Option<&str>,
    ctx: &InferenceContext<'_>,
) -> Result<PredictionOutcome, MediatorError> {
    let started = Instant::now();
    let (prompt, community) = prepare_prompt(query, history, profile, ctx)?;
    let completion = ctx.llm.complete(&prompt)?;
    let (prediction, valid) = postprocess(&completion, ctx.task);
    Ok(PredictionOutcome {
        record_id: query.record_id.clone(),
        user_id: query.user_id.clone(),
        prediction,
        gold: query.gold().to_string(),
        valid,
        community,
        latency_ms: started.elapsed().as_secs_f64() * 1000.0,
    })
}
