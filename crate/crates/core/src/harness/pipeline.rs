use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use tracing::info;

use super::config::{EvalSelection, ExperimentConfig};
use super::synthetic::make_synthetic_dataset;
use super::{EvalReport, HarnessError, RunManifest};
use crate::community::{kmeans, CommunityModel};
use crate::dataset::{
    cap_history, load_dataset, sample_users, select_top_active, split_by_activity_quantile,
    ActivitySide, Dataset, InteractionRecord, TaskKind, UserHistory,
};
use crate::embedding::EmbeddingProvider;
use crate::global_memory::{
    evolve_all, memory_dir_name, phase_similarity, save_memory, GlobalConfig, GlobalMemoryState,
};
use crate::llm::LlmClient;
use crate::mediator::{infer, GlobalMemories, InferenceContext, PredictionOutcome};
use crate::metrics::{evaluate, MetricReport, TextDiversity};
use crate::profile::{
    build_profile_vector, summarize_profile, update_profile, ProfileLimits, ProfileRecord,
};
use crate::template::{TemplateRegistry, TemplateSet};
use crate::temporal::{partition, PhasePartition};

/// Everything a run produced, in memory.
#[derive(Debug)]
pub struct PipelineRun {
    pub report: EvalReport,
    pub manifest: RunManifest,
    pub outcomes: Vec<PredictionOutcome>,
    pub memories: Vec<GlobalMemoryState>,
    pub model: Option<CommunityModel>,
    pub partition: Option<PhasePartition>,
    /// Pool profiles after every phase update, ordered by (user, phase).
    pub profile_trace: Vec<ProfileRecord>,
    pub eval_profiles: BTreeMap<String, String>,
}

/// A pool user's profile after one phase.
pub type ProfileTrace = ProfileRecord;

struct Stages<'a> {
    out: Option<&'a Path>,
    manifest: RunManifest,
}

impl Stages<'_> {
    fn run<T, E: Display>(
        &mut self,
        name: &'static str,
        f: impl FnOnce() -> Result<T, E>,
    ) -> Result<T, HarnessError> {
        info!(stage = name, "running");
        match f() {
            Ok(v) => {
                self.manifest.stages.push(name.to_string());
                Ok(v)
            }
            Err(e) => Err(self.fail(name, e.to_string())),
        }
    }

    fn fail(&mut self, stage: &'static str, message: String) -> HarnessError {
        self.manifest.failed_stage = Some(stage.to_string());
        self.manifest.error = Some(message.clone());
        self.manifest.finished_at = Some(now());
        let manifest = self.out.and_then(|dir| {
            let path = dir.join("manifest.json");
            let text = serde_json::to_string_pretty(&self.manifest).ok()?;
            std::fs::write(&path, text).ok().map(|_| path)
        });
        HarnessError::Stage {
            stage,
            message,
            manifest,
        }
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), HarnessError> {
        let Some(dir) = self.out else { return Ok(()) };
        let path = dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| self.fail("persist", format!("{}: {e}", parent.display())))?;
        }
        std::fs::write(&path, bytes)
            .map_err(|e| self.fail("persist", format!("{}: {e}", path.display())))?;
        self.manifest.artifacts.push(rel.to_string());
        Ok(())
    }

    fn write_json(&mut self, rel: &str, value: &impl serde::Serialize) -> Result<(), HarnessError> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| self.fail("persist", e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    fn write_jsonl<T: serde::Serialize>(
        &mut self,
        rel: &str,
        rows: &[T],
    ) -> Result<(), HarnessError> {
        let mut buf = Vec::new();
        for row in rows {
            serde_json::to_writer(&mut buf, row)
                .map_err(|e| self.fail("persist", e.to_string()))?;
            buf.push(b'\n');
        }
        self.write(rel, &buf)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

pub fn load_data(config: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    if let Some(spec) = &config.synthetic {
        return make_synthetic_dataset(spec, config.seed_for("synthetic"));
    }
    let path = config
        .dataset
        .as_ref()
        .ok_or_else(|| HarnessError::Config("no dataset configured".into()))?;
    let desc = config
        .task
        .as_ref()
        .ok_or_else(|| HarnessError::Config("no task descriptor configured".into()))?;
    let task = TaskKind::try_from(desc).map_err(|e| HarnessError::Config(e.to_string()))?;
    load_dataset(path, task).map_err(|e| HarnessError::Stage {
        stage: "load",
        message: e.to_string(),
        manifest: None,
    })
}

fn subset(dataset: &Dataset, keep: impl Fn(&str) -> bool) -> Dataset {
    Dataset {
        task: dataset.task.clone(),
        users: dataset
            .users
            .iter()
            .filter(|(u, _)| keep(u))
            .map(|(u, h)| (u.clone(), h.clone()))
            .collect(),
    }
}

/// `(eval users, pool users)`.
pub fn select_eval(
    dataset: &Dataset,
    selection: &EvalSelection,
) -> Result<(Dataset, Dataset), HarnessError> {
    let (eval, pool) = match selection {
        EvalSelection::TopActive { count } => {
            select_top_active(dataset, *count).map_err(|e| HarnessError::Config(e.to_string()))?
        }
        EvalSelection::Prefix { prefix } => (
            subset(dataset, |u| u.starts_with(prefix.as_str())),
            subset(dataset, |u| !u.starts_with(prefix.as_str())),
        ),
        EvalSelection::Users { ids } => {
            let ids: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
            if let Some(missing) = ids.iter().find(|u| !dataset.users.contains_key(**u)) {
                return Err(HarnessError::Config(format!(
                    "eval user {missing:?} is not in the dataset"
                )));
            }
            (
                subset(dataset, |u| ids.contains(u)),
                subset(dataset, |u| !ids.contains(u)),
            )
        }
    };
    if eval.users.is_empty() {
        return Err(HarnessError::Config("eval user selection is empty".into()));
    }
    Ok((eval, pool))
}

/// Chronological holdout: the trailing `⌈fraction·n⌉` records (at least one)
/// of each eval user become queries; the rest is local history.
pub fn holdout(eval: &Dataset, fraction: f64) -> (Dataset, Vec<InteractionRecord>) {
    let mut local = BTreeMap::new();
    let mut queries = Vec::new();
    for (user, history) in &eval.users {
        let n = history.len();
        let held = ((n as f64 * fraction).ceil() as usize)
            .clamp(1, n.max(1))
            .min(n);
        let split = n - held;
        local.insert(
            user.clone(),
            UserHistory::new(user.clone(), history.records[..split].to_vec()),
        );
        queries.extend(history.records[split..].iter().cloned());
    }
    (
        Dataset {
            task: eval.task.clone(),
            users: local,
        },
        queries,
    )
}

/// `(user, profile)` pairs updated in each phase.
pub type ProfilesByPhase = Vec<Vec<(String, String)>>;

/// Sequential per-user profile updates over the phases, users in parallel.
/// Returns the profiles updated in each phase and the full trace.
pub fn pool_profiles(
    pool: &Dataset,
    phases: &PhasePartition,
    llm: &LlmClient,
    limits: ProfileLimits,
) -> Result<(ProfilesByPhase, Vec<ProfileRecord>), crate::profile::ProfileError> {
    let lookup = phases.lookup();
    let t = phases.num_phases();
    let per_user: Vec<Vec<ProfileRecord>> = pool
        .users
        .par_iter()
        .map(|(user, history)| {
            let mut by_phase: Vec<Vec<InteractionRecord>> = vec![Vec::new(); t];
            for r in &history.records {
                if let Some(&p) = lookup.get(r.record_id.as_str()) {
                    by_phase[p].push(r.clone());
                }
            }
            let mut profile = String::new();
            let mut trace = Vec::new();
            for (phase, records) in by_phase.iter().enumerate() {
                if records.is_empty() {
                    continue;
                }
                profile = update_profile(&profile, records, llm, limits)?;
                trace.push(ProfileRecord {
                    user_id: user.clone(),
                    phase,
                    profile_text: profile.clone(),
                });
            }
            Ok(trace)
        })
        .collect::<Result<_, crate::profile::ProfileError>>()?;
    let mut by_phase: Vec<Vec<(String, String)>> = vec![Vec::new(); t];
    let mut trace = Vec::new();
    for user_trace in per_user {
        for r in user_trace {
            by_phase[r.phase].push((r.user_id.clone(), r.profile_text.clone()));
            trace.push(r);
        }
    }
    Ok((by_phase, trace))
}

pub fn build_client(config: &ExperimentConfig) -> Result<LlmClient, HarnessError> {
    let mut registry = TemplateRegistry::builtin();
    if let Some(dir) = &config.templates_dir {
        let set = TemplateSet::load_dir(config.template_id.clone(), dir)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        registry = registry.with(set);
    }
    let templates = registry
        .get(&config.template_id)
        .map_err(|e| HarnessError::Config(e.to_string()))?
        .clone();
    let backend = config
        .backend
        .build(&registry)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut client = LlmClient::new(backend, templates);
    client.max_tokens = config.max_tokens;
    client.temperature = config.temperature;
    Ok(client)
}

fn digest_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

struct Serving<'a> {
    config: &'a ExperimentConfig,
    task: &'a TaskKind,
    llm: &'a LlmClient,
    local: &'a Dataset,
    eval_profiles: &'a BTreeMap<String, String>,
}

impl Serving<'_> {
    fn infer_all(
        &self,
        queries: &[InteractionRecord],
        memories: &GlobalMemories,
    ) -> Result<Vec<PredictionOutcome>, String> {
        let inference = self.config.inference();
        let ctx = InferenceContext {
            config: &inference,
            task: self.task,
            memories,
            llm: self.llm,
        };
        let empty = UserHistory::new("", Vec::new());
        let mut outcomes = queries
            .par_iter()
            .map(|q| {
                let history = self.local.users.get(&q.user_id).unwrap_or(&empty);
                let profile = self.eval_profiles.get(&q.user_id).map(String::as_str);
                infer(q, history, profile, &ctx).map_err(|e| format!("{}: {e}", q.record_id))
            })
            .collect::<Result<Vec<_>, _>>()?;
        outcomes.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        Ok(outcomes)
    }
}

fn serving_memories(
    memories: &[GlobalMemoryState],
    phase: Option<usize>,
    model: Option<&CommunityModel>,
    provider: std::sync::Arc<dyn EmbeddingProvider>,
) -> GlobalMemories {
    let text = |m: &GlobalMemoryState| match phase {
        Some(t) => m
            .phases
            .get(t)
            .map_or_else(|| m.current().to_string(), |p| p.text.clone()),
        None => m.current().to_string(),
    };
    match model {
        Some(model) => GlobalMemories {
            population: None,
            communities: memories.iter().map(text).collect(),
            model: Some(model.clone()),
            provider,
        },
        None => GlobalMemories {
            population: memories.first().map(text),
            communities: Vec::new(),
            model: None,
            provider,
        },
    }
}

fn split_reports(
    outcomes: &[PredictionOutcome],
    splits: &BTreeMap<String, Vec<String>>,
    task: &TaskKind,
    text: Option<TextDiversity<'_>>,
) -> Result<BTreeMap<String, MetricReport>, String> {
    let mut out = BTreeMap::new();
    for (name, users) in splits {
        let users: BTreeSet<&str> = users.iter().map(String::as_str).collect();
        let group: Vec<PredictionOutcome> = outcomes
            .iter()
            .filter(|o| users.contains(o.user_id.as_str()))
            .cloned()
            .collect();
        if group.is_empty() {
            continue;
        }
        out.insert(
            name.clone(),
            evaluate(&group, task, text).map_err(|e| format!("{name}: {e}"))?,
        );
    }
    Ok(out)
}

/// Runs every stage in order and, when `out` is given, persists the
/// artifacts there.
pub fn run_pipeline(
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<PipelineRun, HarnessError> {
    config.validate()?;
    let llm = build_client(config)?;
    run_pipeline_with(config, out, llm)
}

/// [`run_pipeline`] with a caller-supplied client; `config.backend` is ignored.
pub fn run_pipeline_with(
    config: &ExperimentConfig,
    out: Option<&Path>,
    llm: LlmClient,
) -> Result<PipelineRun, HarnessError> {
    config.validate()?;
    let mut stages = Stages {
        out,
        manifest: RunManifest {
            config_digest: config.digest(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now(),
            finished_at: None,
            stages: Vec::new(),
            artifacts: Vec::new(),
            failed_stage: None,
            error: None,
        },
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", dir.display())))?;
    }
    let provider = config
        .embedding
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let limits = ProfileLimits {
        history_budget: config.history_budget,
        profile_cap: config.profile_cap,
    };

    let dataset = match load_data(config) {
        Ok(d) => d,
        Err(HarnessError::Config(m)) => return Err(HarnessError::Config(m)),
        Err(e) => return Err(stages.fail("load", e.to_string())),
    };
    stages.manifest.stages.push("load".into());
    let task = dataset.task.clone();

    let (eval, pool) = select_eval(&dataset, &config.eval_users)?;
    let pool = match config.user_sample {
        Some(m) => sample_users(&pool, m, config.seed_for("user_sample"))
            .map_err(|e| HarnessError::Config(e.to_string()))?,
        None => pool,
    };
    let (local, queries) = holdout(&eval, config.holdout_fraction);
    let local = match config.history_cap {
        Some(n) => cap_history(&local, n).map_err(|e| HarnessError::Config(e.to_string()))?,
        None => local,
    };
    stages.manifest.stages.push("split".into());

    let mut partition_out = None;
    let mut model = None;
    let mut memories = Vec::new();
    let mut trace = Vec::new();
    if config.use_global {
        let pool_records: Vec<InteractionRecord> = pool.records().cloned().collect();
        let phases = stages.run("partition", || {
            partition(&pool_records, config.phases, config.partition_mode)
        })?;
        let (by_phase, profile_trace) =
            stages.run("profiles", || pool_profiles(&pool, &phases, &llm, limits))?;
        trace = profile_trace;
        if config.communities > 1 || config.community_routing {
            let vectors = stages.run("profile_vectors", || {
                pool.users
                    .iter()
                    .map(|(u, h)| {
                        build_profile_vector(h, provider.as_ref()).map(|v| (u.clone(), v))
                    })
                    .collect::<Result<BTreeMap<_, _>, _>>()
            })?;
            model = Some(stages.run("cluster", || {
                kmeans(
                    &vectors,
                    config.communities,
                    config.seed_for("kmeans"),
                    config.kmeans_max_iter,
                )
            })?);
        }
        let global = GlobalConfig {
            max_items: config.max_items,
            prompt_budget: config.global_prompt_budget,
        };
        memories = stages.run("global_memory", || {
            evolve_all(&by_phase, &llm, global, model.as_ref())
        })?;
        partition_out = Some(phases);
    }

    let eval_profiles: BTreeMap<String, String> = if config.local_mode.uses_profile() {
        stages.run("eval_profiles", || {
            local
                .users
                .par_iter()
                .filter(|(_, h)| !h.is_empty())
                .map(|(u, h)| summarize_profile(h, &llm, limits).map(|p| (u.clone(), p)))
                .collect::<Result<BTreeMap<_, _>, _>>()
        })?
    } else {
        BTreeMap::new()
    };

    let serving = Serving {
        config,
        task: &task,
        llm: &llm,
        local: &local,
        eval_profiles: &eval_profiles,
    };
    let final_memories = serving_memories(&memories, None, model.as_ref(), provider.clone());
    let outcomes = stages.run("inference", || serving.infer_all(&queries, &final_memories))?;
    let expected: BTreeSet<&str> = queries.iter().map(|q| q.record_id.as_str()).collect();
    let got: BTreeSet<&str> = outcomes.iter().map(|o| o.record_id.as_str()).collect();
    if expected != got || outcomes.len() != queries.len() {
        return Err(stages.fail(
            "inference",
            "outcome stream does not cover every eval record exactly once".into(),
        ));
    }

    let pct = (config.activity_fraction * 100.0).round() as usize;
    let mut split_users: BTreeMap<String, Vec<String>> = BTreeMap::new();
    split_users.insert("overall".into(), eval.users.keys().cloned().collect());
    for (side, name) in [(ActivitySide::Bottom, "bottom"), (ActivitySide::Top, "top")] {
        let part = split_by_activity_quantile(&eval, config.activity_fraction, side)
            .map_err(|e| stages.fail("metrics", e.to_string()))?;
        split_users.insert(
            format!("{name}_{pct}"),
            part.users.keys().cloned().collect(),
        );
    }
    let text = TextDiversity {
        provider: provider.as_ref(),
        k_clusters: config.text_clusters,
        seed: config.seed_for("text_diversity"),
    };
    let text = matches!(task, TaskKind::Generation).then_some(text);
    let splits = stages.run("metrics", || {
        split_reports(&outcomes, &split_users, &task, text)
    })?;

    let mut per_phase = Vec::new();
    if config.per_phase_eval && config.use_global {
        for t in 0..config.phases {
            let mems = serving_memories(&memories, Some(t), model.as_ref(), provider.clone());
            let phase_outcomes =
                stages.run("per_phase_inference", || serving.infer_all(&queries, &mems))?;
            per_phase.push(stages.run("per_phase_metrics", || {
                split_reports(&phase_outcomes, &split_users, &task, text)
            })?);
        }
    }

    let mut similarity = BTreeMap::new();
    let mut memory_digests = BTreeMap::new();
    for m in &memories {
        let name = memory_dir_name(m);
        similarity.insert(
            name.clone(),
            stages.run("phase_similarity", || {
                phase_similarity(m, provider.as_ref())
            })?,
        );
        memory_digests.insert(name, digest_hex(m.current()));
    }

    let mut counts = BTreeMap::new();
    counts.insert("eval_users".to_string(), eval.num_users());
    counts.insert("pool_users".to_string(), pool.num_users());
    counts.insert("eval_records".to_string(), queries.len());
    counts.insert("local_records".to_string(), local.num_records());
    counts.insert("pool_records".to_string(), pool.num_records());
    counts.insert(
        "invalid_predictions".to_string(),
        outcomes.iter().filter(|o| !o.valid).count(),
    );

    let report = EvalReport {
        config_digest: config.digest(),
        task: task.name().to_string(),
        splits,
        split_users,
        counts,
        phase_similarity: similarity,
        memory_digests,
        per_phase,
    };

    if let Some(out) = out {
        stages.write_json("config.json", config)?;
        stages.write_jsonl("outcomes.jsonl", &outcomes)?;
        if let Some(p) = &partition_out {
            stages.write_json("partition.json", p)?;
        }
        if let Some(m) = &model {
            stages.write_json("community.json", m)?;
        }
        if !trace.is_empty() {
            stages.write_jsonl("profiles.jsonl", &trace)?;
        }
        if !eval_profiles.is_empty() {
            let rows: Vec<ProfileRecord> = eval_profiles
                .iter()
                .map(|(u, p)| ProfileRecord {
                    user_id: u.clone(),
                    phase: 0,
                    profile_text: p.clone(),
                })
                .collect();
            stages.write_jsonl("eval_profiles.jsonl", &rows)?;
        }
        for m in &memories {
            let rel = format!("memories/{}", memory_dir_name(m));
            let dir = out.join(&rel);
            save_memory(m, &dir).map_err(|e| stages.fail("persist", e.to_string()))?;
            stages.manifest.artifacts.push(rel);
        }
        stages.write_json("report.json", &report)?;
        stages.manifest.stages.push("persist".into());
        stages.manifest.finished_at = Some(now());
        stages.manifest.artifacts.push("manifest.json".into());
        let manifest = stages.manifest.clone();
        stages.write_json("manifest.json", &manifest)?;
        stages.manifest.artifacts.pop();
    } else {
        stages.manifest.finished_at = Some(now());
    }

    Ok(PipelineRun {
        report,
        manifest: stages.manifest,
        outcomes,
        memories,
        model,
        partition: partition_out,
        profile_trace: trace,
        eval_profiles,
    })
}

/// Writes outcomes to any writer in the persisted format.
pub fn write_outcomes(outcomes: &[PredictionOutcome], w: &mut impl Write) -> std::io::Result<()> {
    for o in outcomes {
        serde_json::to_writer(&mut *w, o)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
