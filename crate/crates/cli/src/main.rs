//! `logo` command line: thin wrappers over the logo-core stages.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use logo_core::community::kmeans;
use logo_core::dataset::{sample_users, Dataset, InteractionRecord, TaskDescriptor, TaskKind};
use logo_core::global_memory::{
    evolve_all, load_all, load_memory, memory_dir_name, phase_similarity, save_memory,
    GlobalConfig, GlobalMemoryState,
};
use logo_core::harness::{
    build_client, load_data, pool_profiles, run_pipeline, run_sweep, select_eval, ExperimentConfig,
    HarnessError, SweepAxis,
};
use logo_core::mediator::PredictionOutcome;
use logo_core::metrics::{evaluate, TextDiversity};
use logo_core::profile::{build_profile_vector, ProfileLimits};
use logo_core::temporal::{partition, PhasePartition};

#[derive(Parser)]
#[command(
    name = "logo",
    version,
    about = "Local-global memory personalization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Opts {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config field, e.g. `--set T=5` or `--set backend.retry.attempts=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; JSON goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as JSONL plus its task descriptor.
    Synth(Opts),
    /// Load a dataset and summarize it.
    Ingest(Opts),
    /// Split the pool records into T chronological phases.
    Partition(Opts),
    /// Run the per-phase profile updates of the pool users.
    Profiles(Opts),
    /// Cluster pool users into K communities.
    Cluster(Opts),
    /// Evolve the global memory (population or per community).
    BuildGlobal(Opts),
    /// Run the full pipeline.
    Eval(Opts),
    /// Run the pipeline once per value of one axis.
    Sweep {
        #[command(flatten)]
        opts: Opts,
        /// T, k_retrieve, K, history_cap or user_sample
        #[arg(long)]
        axis: String,
        /// Comma separated; `null` lifts an optional cap.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Prediction diversity of an outcomes.jsonl file.
    Diversity {
        #[command(flatten)]
        opts: Opts,
        outcomes: PathBuf,
    },
    /// Phase-by-phase similarity of saved global memories.
    PhaseSim {
        #[command(flatten)]
        opts: Opts,
        memories: PathBuf,
    },
}

impl Command {
    fn opts(&self) -> &Opts {
        match self {
            Command::Synth(o)
            | Command::Ingest(o)
            | Command::Partition(o)
            | Command::Profiles(o)
            | Command::Cluster(o)
            | Command::BuildGlobal(o)
            | Command::Eval(o) => o,
            Command::Sweep { opts, .. }
            | Command::Diversity { opts, .. }
            | Command::PhaseSim { opts, .. } => opts,
        }
    }
}

enum Failure {
    Config(anyhow::Error),
    Stage(anyhow::Error),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config() {
            Failure::Config(e.into())
        } else {
            Failure::Stage(e.into())
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn stage_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Stage(e.into())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn load_config(opts: &Opts) -> Result<ExperimentConfig, Failure> {
    let base = match &opts.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    Ok(base.with_overrides(opts.set.iter().map(String::as_str))?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let opts = cli.command.opts();
    let mut config = load_config(opts)?;
    let out = opts.out.as_deref();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(config_err)?;
    }
    match &cli.command {
        Command::Synth(_) => {
            if config.synthetic.is_none() {
                config.synthetic = Some(Default::default());
            }
            config.validate()?;
            let data = load_data(&config)?;
            ingest_summary(&data, out)
        }
        Command::Ingest(_) => {
            config.validate()?;
            let data = load_data(&config)?;
            ingest_summary(&data, out)
        }
        Command::Partition(_) => {
            let (_, phases) = partitioned(&config)?;
            emit(out, "partition.json", &phases)
        }
        Command::Profiles(_) => {
            let (pool, phases) = partitioned(&config)?;
            let llm = build_client(&config)?;
            let (_, trace) =
                pool_profiles(&pool, &phases, &llm, limits(&config)).map_err(stage_err)?;
            emit_jsonl(out, "profiles.jsonl", &trace)
        }
        Command::Cluster(_) => {
            let pool = pool(&config)?;
            let model = cluster(&config, &pool)?;
            emit(out, "community.json", &model)
        }
        Command::BuildGlobal(_) => {
            let memories = build_global(&config)?;
            match out {
                Some(dir) => {
                    for m in &memories {
                        save_memory(m, &dir.join("memories").join(memory_dir_name(m)))
                            .map_err(stage_err)?;
                    }
                    let names: Vec<String> = memories.iter().map(memory_dir_name).collect();
                    print_json(&json!({ "memories": names }))
                }
                None => {
                    let finals: BTreeMap<String, &str> = memories
                        .iter()
                        .map(|m| (memory_dir_name(m), m.current()))
                        .collect();
                    print_json(&finals)
                }
            }
        }
        Command::Eval(_) => {
            let run = run_pipeline(&config, out)?;
            print_json(
                &run.report
                    .splits
                    .iter()
                    .map(|(k, r)| (k, &r.metrics))
                    .collect::<BTreeMap<_, _>>(),
            )
        }
        Command::Sweep { axis, values, .. } => {
            let axis = SweepAxis::parse(axis)?;
            let values: Vec<Value> = values
                .iter()
                .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone())))
                .collect();
            let reports = run_sweep(&config, axis, &values, out)?;
            let rows: Vec<Value> = reports
                .iter()
                .map(|(v, r)| json!({ "value": v, "overall": r.splits.get("overall").map(|m| &m.metrics) }))
                .collect();
            print_json(&json!({ "axis": axis.key(), "runs": rows }))
        }
        Command::Diversity { outcomes, .. } => diversity(&config, outcomes),
        Command::PhaseSim { memories, .. } => {
            let provider = config.embedding.build().map_err(config_err)?;
            let states: BTreeMap<String, GlobalMemoryState> =
                if memories.join("manifest.json").exists() {
                    let name = memories.file_name().map_or_else(
                        || "memory".to_string(),
                        |n| n.to_string_lossy().into_owned(),
                    );
                    BTreeMap::from([(name, load_memory(memories).map_err(stage_err)?)])
                } else {
                    load_all(memories).map_err(stage_err)?
                };
            if states.is_empty() {
                return Err(stage_err(anyhow!(
                    "no saved memories under {}",
                    memories.display()
                )));
            }
            let mut sims = BTreeMap::new();
            for (name, state) in &states {
                sims.insert(
                    name.clone(),
                    phase_similarity(state, provider.as_ref()).map_err(stage_err)?,
                );
            }
            emit(out, "phase_similarity.json", &sims)
        }
    }
}

fn limits(config: &ExperimentConfig) -> ProfileLimits {
    ProfileLimits {
        history_budget: config.history_budget,
        profile_cap: config.profile_cap,
    }
}

/// Users that build the global memory, after eval selection and sampling.
fn pool(config: &ExperimentConfig) -> Result<Dataset, Failure> {
    config.validate()?;
    let data = load_data(config)?;
    let (_, pool) = select_eval(&data, &config.eval_users)?;
    match config.user_sample {
        Some(m) => sample_users(&pool, m, config.seed_for("user_sample")).map_err(config_err),
        None => Ok(pool),
    }
}

fn partitioned(config: &ExperimentConfig) -> Result<(Dataset, PhasePartition), Failure> {
    let pool = pool(config)?;
    let records: Vec<InteractionRecord> = pool.records().cloned().collect();
    let phases = partition(&records, config.phases, config.partition_mode).map_err(stage_err)?;
    Ok((pool, phases))
}

fn cluster(
    config: &ExperimentConfig,
    pool: &Dataset,
) -> Result<logo_core::community::CommunityModel, Failure> {
    let provider = config.embedding.build().map_err(config_err)?;
    let vectors = pool
        .users
        .iter()
        .map(|(u, h)| build_profile_vector(h, provider.as_ref()).map(|v| (u.clone(), v)))
        .collect::<Result<BTreeMap<_, _>, _>>()
        .map_err(stage_err)?;
    kmeans(
        &vectors,
        config.communities,
        config.seed_for("kmeans"),
        config.kmeans_max_iter,
    )
    .map_err(stage_err)
}

fn build_global(config: &ExperimentConfig) -> Result<Vec<GlobalMemoryState>, Failure> {
    let (pool, phases) = partitioned(config)?;
    let llm = build_client(config)?;
    let (by_phase, _) = pool_profiles(&pool, &phases, &llm, limits(config)).map_err(stage_err)?;
    let model = if config.communities > 1 || config.community_routing {
        Some(cluster(config, &pool)?)
    } else {
        None
    };
    let global = GlobalConfig {
        max_items: config.max_items,
        prompt_budget: config.global_prompt_budget,
    };
    evolve_all(&by_phase, &llm, global, model.as_ref()).map_err(stage_err)
}

fn task_of(config: &ExperimentConfig) -> Result<TaskKind, Failure> {
    if let Some(spec) = &config.synthetic {
        return Ok(TaskKind::Classification {
            labels: spec.labels(),
        });
    }
    let desc = config.task.as_ref().ok_or_else(|| {
        config_err(anyhow!(
            "diversity needs a task descriptor or a synthetic spec"
        ))
    })?;
    TaskKind::try_from(desc).map_err(config_err)
}

fn diversity(config: &ExperimentConfig, path: &Path) -> Result<(), Failure> {
    let task = task_of(config)?;
    let file = File::open(path)
        .with_context(|| format!("opening {}", path.display()))
        .map_err(stage_err)?;
    let mut outcomes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(stage_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let o: PredictionOutcome = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))
            .map_err(stage_err)?;
        outcomes.push(o);
    }
    let provider = config.embedding.build().map_err(config_err)?;
    let text = matches!(task, TaskKind::Generation).then(|| TextDiversity {
        provider: provider.as_ref(),
        k_clusters: config.text_clusters,
        seed: config.seed_for("text_diversity"),
    });
    let report = evaluate(&outcomes, &task, text).map_err(stage_err)?;
    let per_user: BTreeMap<&String, Option<f64>> = report
        .per_user
        .iter()
        .map(|(u, m)| (u, m.get("diversity").copied()))
        .collect();
    print_json(&json!({ "diversity": report.get("diversity"), "per_user": per_user }))
}

fn ingest_summary(data: &Dataset, out: Option<&Path>) -> Result<(), Failure> {
    let mut lens: Vec<usize> = data.users.values().map(|h| h.len()).collect();
    lens.sort_unstable();
    let summary = json!({
        "task": data.task.name(),
        "users": data.num_users(),
        "records": data.num_records(),
        "history_min": lens.first(),
        "history_median": lens.get(lens.len() / 2),
        "history_max": lens.last(),
    });
    if let Some(dir) = out {
        let path = dir.join("dataset.jsonl");
        let mut w = BufWriter::new(File::create(&path).map_err(stage_err)?);
        data.write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(stage_err)?;
        write_json(&dir.join("task.json"), &TaskDescriptor::from(&data.task))?;
    }
    print_json(&summary)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(stage_err)?;
    text.push('\n');
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(stage_err)
}

/// A closed pipe (`logo eval | head`) is not an error.
fn stdout(bytes: &[u8]) -> Result<(), Failure> {
    match std::io::stdout().lock().write_all(bytes) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(stage_err(e)),
        _ => Ok(()),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(stage_err)?;
    text.push('\n');
    stdout(text.as_bytes())
}

fn emit(out: Option<&Path>, name: &str, value: &impl serde::Serialize) -> Result<(), Failure> {
    match out {
        Some(dir) => write_json(&dir.join(name), value),
        None => print_json(value),
    }
}

fn emit_jsonl<T: serde::Serialize>(
    out: Option<&Path>,
    name: &str,
    rows: &[T],
) -> Result<(), Failure> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row).map_err(stage_err)?;
        buf.push(b'\n');
    }
    match out {
        Some(dir) => std::fs::write(dir.join(name), buf).map_err(stage_err),
        None => stdout(&buf),
    }
}
