use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde_json::{json, Value};

use logo_core::dataset::{Dataset, InteractionRecord, TaskDescriptor, TaskKind};
use logo_core::harness::{
    holdout, load_data, make_synthetic_dataset, planted_community, run_pipeline, run_pipeline_with,
    run_sweep, select_eval, EvalSelection, ExperimentConfig, HarnessError, PipelineRun, SweepAxis,
    SyntheticSpec,
};
use logo_core::llm::{BackendConfig, BackendKind, LlmBackend, LlmClient, Recorder, RuleMock};
use logo_core::mediator::LocalMode;
use logo_core::template::{slots, PromptKind, TemplateRegistry, TemplateSet};

fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        pool_users_per_community: 12,
        cold_users: 4,
        mid_users: 4,
        active_users: 4,
        active_history: [10, 14],
        ..SyntheticSpec::default()
    }
}

fn config() -> ExperimentConfig {
    ExperimentConfig {
        synthetic: Some(small_spec()),
        eval_users: EvalSelection::Prefix {
            prefix: "eval-".into(),
        },
        k_retrieve: 2,
        ..ExperimentConfig::default()
    }
}

/// Outcomes as persisted, which leaves out wall-clock latency.
fn persisted(run: &PipelineRun) -> String {
    serde_json::to_string(&run.outcomes).unwrap()
}

fn recorded(
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> (PipelineRun, Vec<String>, LlmClient) {
    let recorder = Arc::new(Recorder::new(RuleMock::new(TemplateRegistry::builtin())));
    let backend: Arc<dyn LlmBackend> = recorder.clone();
    let llm = LlmClient::new(backend, TemplateSet::builtin(&config.template_id).unwrap());
    let run = run_pipeline_with(config, out, llm.clone()).unwrap();
    (run, recorder.prompts(), llm)
}

fn global_update_priors(llm: &LlmClient, prompts: &[String]) -> Vec<(String, Vec<String>)> {
    let template = llm.templates().get(PromptKind::GlobalUpdate);
    prompts
        .iter()
        .filter_map(|p| template.match_prompt(p))
        .map(|v| {
            let prior = v.get(slots::GLOBAL_MEMORY_PRIOR).unwrap().to_string();
            let users = v
                .get(slots::PERSONAL_MEMORIES)
                .unwrap()
                .lines()
                .filter_map(|l| {
                    l.strip_prefix("User ")?
                        .strip_suffix(':')
                        .map(str::to_string)
                })
                .collect();
            (prior, users)
        })
        .collect()
}

#[test]
fn reruns_are_identical_and_complete() {
    let c = config();
    let a = run_pipeline(&c, None).unwrap();
    let b = run_pipeline(&c, None).unwrap();
    assert_eq!(persisted(&a), persisted(&b));
    assert_eq!(a.report, b.report);

    let data = load_data(&c).unwrap();
    let (eval, _) = select_eval(&data, &c.eval_users).unwrap();
    let (_, queries) = holdout(&eval, c.holdout_fraction);
    let want: Vec<&str> = {
        let mut ids: Vec<&str> = queries.iter().map(|q| q.record_id.as_str()).collect();
        ids.sort();
        ids
    };
    let got: Vec<&str> = a.outcomes.iter().map(|o| o.record_id.as_str()).collect();
    assert_eq!(got, want);
    assert_eq!(a.report.counts["eval_records"], queries.len());
}

#[test]
fn persisted_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config();
    c.communities = 2;
    c.community_routing = true;
    c.local_mode = LocalMode::Hybrid;
    let run = run_pipeline(&c, Some(dir.path())).unwrap();
    for f in [
        "config.json",
        "outcomes.jsonl",
        "partition.json",
        "community.json",
        "profiles.jsonl",
        "eval_profiles.jsonl",
        "report.json",
        "manifest.json",
        "memories/community_0/manifest.json",
        "memories/community_1/phase_4.txt",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config_digest"], json!(c.digest()));
    assert!(manifest["finished_at"].is_string());
    assert!(manifest["stages"]
        .as_array()
        .unwrap()
        .iter()
        .any(|s| s == "cluster"));
    let artifacts: Vec<&str> = manifest["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a.as_str().unwrap())
        .collect();
    assert_eq!(
        artifacts.iter().filter(|a| **a == "manifest.json").count(),
        1
    );

    // report.json carries no timestamps and is reproducible byte for byte
    let again = tempfile::tempdir().unwrap();
    run_pipeline(&c, Some(again.path())).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(
        read(dir.path(), "report.json"),
        read(again.path(), "report.json")
    );
    assert_eq!(
        read(dir.path(), "outcomes.jsonl"),
        read(again.path(), "outcomes.jsonl")
    );

    let reloaded: ExperimentConfig =
        ExperimentConfig::load(&dir.path().join("config.json")).unwrap();
    assert_eq!(reloaded, c);
    let first_line = String::from_utf8(read(dir.path(), "outcomes.jsonl")).unwrap();
    let first: Value = serde_json::from_str(first_line.lines().next().unwrap()).unwrap();
    assert!(first.get("latency_ms").is_none());
    assert!(first.get("community").is_some());
    assert_eq!(
        run.eval_profiles.len(),
        run.report.counts["eval_users"] - small_spec().cold_users
    );
}

#[test]
fn single_community_routing_matches_population_memory() {
    let plain = run_pipeline(&config(), None).unwrap();
    let routed = run_pipeline(
        &ExperimentConfig {
            community_routing: true,
            ..config()
        },
        None,
    )
    .unwrap();
    assert_eq!(plain.memories[0].phases, routed.memories[0].phases);
    let strip = |r: &PipelineRun| -> Vec<(String, String)> {
        r.outcomes
            .iter()
            .map(|o| (o.record_id.clone(), o.prediction.clone()))
            .collect()
    };
    assert_eq!(strip(&plain), strip(&routed));
    assert!(routed.outcomes.iter().all(|o| o.community == Some(0)));
    assert!(plain.outcomes.iter().all(|o| o.community.is_none()));
}

#[test]
fn prompts_never_leak_placeholders() {
    for mode in [
        LocalMode::None,
        LocalMode::Rag,
        LocalMode::Profile,
        LocalMode::Hybrid,
    ] {
        let c = ExperimentConfig {
            local_mode: mode,
            communities: 2,
            community_routing: true,
            ..config()
        };
        let (_, prompts, llm) = recorded(&c, None);
        let tokens = llm.templates().placeholder_tokens();
        assert!(!tokens.is_empty());
        for p in &prompts {
            for t in &tokens {
                assert!(
                    !p.contains(t.as_str()),
                    "{mode:?}: {t} left in prompt:\n{p}"
                );
            }
        }
    }
}

#[test]
fn ablations_keep_memories_out_of_prompts() {
    let base = run_pipeline(&config(), None).unwrap();
    let memory = base.memories[0].current().to_string();
    assert!(memory.starts_with("- "));

    let c = ExperimentConfig {
        use_global: false,
        ..config()
    };
    let (run, prompts, llm) = recorded(&c, None);
    assert!(run.memories.is_empty());
    assert!(global_update_priors(&llm, &prompts).is_empty());
    assert!(prompts.iter().all(|p| !p.contains(&memory)));

    let c = ExperimentConfig {
        use_global: false,
        local_mode: LocalMode::None,
        ..config()
    };
    let (run, prompts, _) = recorded(&c, None);
    assert_eq!(prompts.len(), run.outcomes.len());
    let data = load_data(&c).unwrap();
    let (eval, _) = select_eval(&data, &c.eval_users).unwrap();
    let (local, _) = holdout(&eval, c.holdout_fraction);
    for r in local.records() {
        let rendered = format!("| A: {}", r.response);
        assert!(prompts
            .iter()
            .all(|p| !p.contains(&rendered) && !p.contains(&r.query)));
    }
}

#[test]
fn community_memories_only_see_their_members() {
    let c = ExperimentConfig {
        communities: 2,
        community_routing: true,
        ..config()
    };
    let (run, prompts, llm) = recorded(&c, None);
    let model = run.model.as_ref().unwrap();
    let updates = global_update_priors(&llm, &prompts);
    assert!(!updates.is_empty());
    for (prior, users) in &updates {
        let communities: BTreeSet<usize> = users
            .iter()
            .map(|u| model.community_of(u).unwrap())
            .collect();
        assert_eq!(communities.len(), 1, "mixed prompt: {users:?}");
        let c = *communities.iter().next().unwrap();
        let memory = run
            .memories
            .iter()
            .find(|m| m.community_id == Some(c))
            .unwrap();
        let known = prior == "(none)" || memory.phases.iter().any(|p| &p.text == prior);
        assert!(known, "community {c} prompt carried a foreign memory");
        assert!(
            users.iter().all(|u| u.starts_with("pool-")),
            "eval user in a global prompt"
        );
    }

    // with well separated planted communities, each memory names one tag family
    let spec = small_spec();
    for m in &run.memories {
        let text = m.current();
        let families: BTreeSet<usize> = (0..spec.communities)
            .filter(|&f| {
                spec.community_labels(f)
                    .iter()
                    .any(|l| text.contains(&format!("- {l} ")))
            })
            .collect();
        assert_eq!(families.len(), 1, "{text}");
    }
    for u in model.assignment.keys() {
        let members_family = planted_community(&spec, u).unwrap();
        let peers: BTreeSet<usize> = model
            .members(model.community_of(u).unwrap())
            .iter()
            .map(|p| planted_community(&spec, p).unwrap())
            .collect();
        assert_eq!(peers, BTreeSet::from([members_family]));
    }
}

#[test]
fn profiles_update_phase_by_phase() {
    let (run, _, _) = recorded(&config(), None);
    let mut last: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &run.profile_trace {
        if let Some(prev) = last.insert(r.user_id.as_str(), r.phase) {
            assert!(r.phase > prev);
        }
    }
    let partition = run.partition.as_ref().unwrap();
    assert_eq!(partition.num_phases(), 5);
    let states = &run.memories[0].phases;
    assert_eq!(states.len(), 5);
    for (t, p) in states.iter().enumerate() {
        assert_eq!(p.index, t);
    }
}

#[test]
fn history_cap_and_user_sample() {
    let capped = run_pipeline(
        &ExperimentConfig {
            history_cap: Some(1),
            ..config()
        },
        None,
    )
    .unwrap();
    assert!(capped.report.counts["local_records"] <= capped.report.counts["eval_users"]);

    let sampled = run_pipeline(
        &ExperimentConfig {
            user_sample: Some(5),
            ..config()
        },
        None,
    )
    .unwrap();
    assert_eq!(sampled.report.counts["pool_users"], 5);
    let users: BTreeSet<&str> = sampled
        .profile_trace
        .iter()
        .map(|r| r.user_id.as_str())
        .collect();
    assert_eq!(users.len(), 5);
    assert!(run_pipeline(
        &ExperimentConfig {
            user_sample: Some(10_000),
            ..config()
        },
        None
    )
    .unwrap_err()
    .is_config());
}

#[test]
fn per_phase_evaluation() {
    let run = run_pipeline(
        &ExperimentConfig {
            per_phase_eval: true,
            phases: 3,
            ..config()
        },
        None,
    )
    .unwrap();
    assert_eq!(run.report.per_phase.len(), 3);
    let last = &run.report.per_phase[2]["overall"];
    assert_eq!(last, &run.report.splits["overall"]);
    for sim in run.report.phase_similarity.values() {
        assert_eq!(sim.len(), 3);
    }
}

#[test]
fn sweeps_write_one_run_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let reports = run_sweep(
        &config(),
        SweepAxis::T,
        &[json!(1), json!(3)],
        Some(dir.path()),
    )
    .unwrap();
    assert_eq!(reports.len(), 2);
    assert!(dir.path().join("T=1/report.json").is_file());
    assert!(dir
        .path()
        .join("T=3/memories/population/phase_2.txt")
        .is_file());
    let index: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("sweep.json")).unwrap())
            .unwrap();
    assert_eq!(index["axis"], "T");

    let caps = run_sweep(
        &config(),
        SweepAxis::HistoryCap,
        &[json!(1), Value::Null],
        None,
    )
    .unwrap();
    assert!(caps[0].1.counts["local_records"] < caps[1].1.counts["local_records"]);
    assert_eq!(
        SweepAxis::parse("k_retrieve").unwrap(),
        SweepAxis::KRetrieve
    );
    assert!(SweepAxis::parse("bogus").is_err());
    assert!(run_sweep(&config(), SweepAxis::K, &[], None)
        .unwrap_err()
        .is_config());
}

#[test]
fn config_errors_and_stage_failures() {
    let bad = ExperimentConfig {
        phases: 0,
        ..config()
    };
    assert!(run_pipeline(&bad, None).unwrap_err().is_config());
    assert!(run_pipeline(&ExperimentConfig::default(), None)
        .unwrap_err()
        .is_config());

    let dir = tempfile::tempdir().unwrap();
    let strict = ExperimentConfig {
        backend: BackendConfig::new(BackendKind::Replay {
            cache_path: dir.path().join("empty.jsonl"),
            strict: true,
            inner: None,
        }),
        ..config()
    };
    let out = dir.path().join("run");
    match run_pipeline(&strict, Some(&out)) {
        Err(HarnessError::Stage {
            stage, manifest, ..
        }) => {
            assert_eq!(stage, "profiles");
            let text = std::fs::read_to_string(manifest.unwrap()).unwrap();
            let m: Value = serde_json::from_str(&text).unwrap();
            assert_eq!(m["failed_stage"], "profiles");
            assert_eq!(m["stages"], json!(["load", "split", "partition"]));
        }
        other => panic!(
            "expected a stage failure, got {:?}",
            other.map(|r| r.report)
        ),
    }
}

#[test]
fn jsonl_dataset_matches_synthetic_source() {
    let dir = tempfile::tempdir().unwrap();
    let c = config();
    let data = make_synthetic_dataset(&small_spec(), c.seed_for("synthetic")).unwrap();
    let path = dir.path().join("data.jsonl");
    let mut buf = Vec::new();
    data.write_jsonl(&mut buf).unwrap();
    std::fs::write(&path, buf).unwrap();
    let from_file = ExperimentConfig {
        synthetic: None,
        dataset: Some(path),
        task: Some(TaskDescriptor::from(&data.task)),
        ..c.clone()
    };
    let a = run_pipeline(&c, None).unwrap();
    let b = run_pipeline(&from_file, None).unwrap();
    assert_eq!(persisted(&a), persisted(&b));
}

fn write_dataset(dir: &Path, records: Vec<InteractionRecord>, task: &TaskKind) -> ExperimentConfig {
    let data = Dataset::from_records(task.clone(), records).unwrap();
    let path = dir.join("data.jsonl");
    let mut buf = Vec::new();
    data.write_jsonl(&mut buf).unwrap();
    std::fs::write(&path, buf).unwrap();
    ExperimentConfig {
        dataset: Some(path),
        task: Some(TaskDescriptor::from(task)),
        eval_users: EvalSelection::TopActive { count: 4 },
        phases: 2,
        ..ExperimentConfig::default()
    }
}

fn rec(user: usize, i: usize, query: String, response: String) -> InteractionRecord {
    InteractionRecord {
        user_id: format!("user{user}"),
        record_id: format!("user{user}-{i}"),
        query,
        response: response.clone(),
        timestamp: (i * 10 + user) as i64,
        label: Some(response),
    }
}

#[test]
fn regression_and_generation_tasks_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let task = TaskKind::Regression { min: 1.0, max: 5.0 };
    let records = (0..10)
        .flat_map(|u| {
            (0..(3 + u)).map(move |i| {
                rec(
                    u,
                    i,
                    format!("rate item {i}"),
                    ((u + i) % 5 + 1).to_string(),
                )
            })
        })
        .collect();
    let c = write_dataset(dir.path(), records, &task);
    let run = run_pipeline(&c, None).unwrap();
    let overall = &run.report.splits["overall"];
    assert!(overall.get("mae").unwrap() <= overall.get("rmse").unwrap() + 1e-12);
    assert_eq!(run.report.task, "regression");

    let dir = tempfile::tempdir().unwrap();
    let words = ["orbit", "rocket", "comet", "galaxy", "nebula", "planet"];
    let records = (0..10)
        .flat_map(|u| {
            (0..(4 + u)).map(move |i| {
                let w = words[(u + i) % words.len()];
                rec(
                    u,
                    i,
                    format!("write a headline about {w}"),
                    format!("new {w} discovered near {}", words[i % 6]),
                )
            })
        })
        .collect();
    let c = write_dataset(dir.path(), records, &TaskKind::Generation);
    let run = run_pipeline(&c, None).unwrap();
    let overall = &run.report.splits["overall"];
    for m in ["rouge1", "rougeL"] {
        let v = overall.get(m).unwrap();
        assert!((0.0..=1.0).contains(&v), "{m} = {v}");
    }
    assert!(overall.get("rouge1").unwrap() > 0.0);
}
