use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SYNTH: &[&str] = &[
    "--set",
    "synthetic={}",
    "--set",
    r#"eval_users={"by":"prefix","prefix":"eval-"}"#,
    "--set",
    "T=3",
];

fn logo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logo"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// `args[0]` is the subcommand; the synthetic setup goes before the
/// remaining flags so those can override it.
fn with_synth<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args[..1]
        .iter()
        .chain(SYNTH)
        .chain(&args[1..])
        .copied()
        .collect()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn eval_writes_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = logo(&with_synth(&["eval", "--out", out.to_str().unwrap()]));
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let metrics = json(&res);
    assert!(metrics["overall"]["accuracy"].is_number());
    for f in [
        "report.json",
        "outcomes.jsonl",
        "manifest.json",
        "config.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let phases: Vec<_> = std::fs::read_dir(out.join("memories/population"))
        .unwrap()
        .filter_map(|e| {
            let name = e.unwrap().file_name().into_string().unwrap();
            name.starts_with("phase_").then_some(name)
        })
        .collect();
    assert_eq!(phases.len(), 3);

    let sims = logo(&with_synth(&[
        "phase-sim",
        out.join("memories").to_str().unwrap(),
    ]));
    assert!(sims.status.success());
    let m = &json(&sims)["population"];
    assert_eq!(m.as_array().unwrap().len(), 3);
    assert_eq!(
        m,
        &read_json(&out.join("report.json"))["phase_similarity"]["population"]
    );

    let div = logo(&with_synth(&[
        "diversity",
        out.join("outcomes.jsonl").to_str().unwrap(),
    ]));
    assert!(div.status.success());
    let reported =
        read_json(&out.join("report.json"))["splits"]["overall"]["metrics"]["diversity"].clone();
    assert_eq!(json(&div)["diversity"], reported);
}

#[test]
fn config_errors_exit_2() {
    assert_eq!(logo(&["eval"]).status.code(), Some(2));
    assert_eq!(
        logo(&with_synth(&["eval", "--set", "no_such_field=1"]))
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        logo(&with_synth(&["eval", "--set", "T=0"])).status.code(),
        Some(2)
    );
    assert_eq!(
        logo(&["eval", "--config", "/nonexistent/config.json"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        logo(&with_synth(&["sweep", "--axis", "nope", "--values", "1"]))
            .status
            .code(),
        Some(2)
    );
    assert_eq!(logo(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn stage_failure_exits_3_and_leaves_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("empty.jsonl");
    let backend = format!(
        r#"backend={{"kind":"replay","cache_path":{:?},"strict":true}}"#,
        cache
    );
    let out = dir.path().join("run");
    let res = logo(&with_synth(&[
        "eval",
        "--set",
        &backend,
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(
        res.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["failed_stage"], "profiles");
}

#[test]
fn synth_output_round_trips_through_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let res = logo(&["synth", "--out", data.to_str().unwrap()]);
    assert!(res.status.success());
    let summary = json(&res);

    let cfg = dir.path().join("config.json");
    let config = serde_json::json!({
        "dataset": data.join("dataset.jsonl"),
        "task": read_json(&data.join("task.json")),
    });
    std::fs::write(&cfg, config.to_string()).unwrap();
    let again = logo(&["ingest", "--config", cfg.to_str().unwrap()]);
    assert!(
        again.status.success(),
        "{}",
        String::from_utf8_lossy(&again.stderr)
    );
    assert_eq!(json(&again), summary);
}

#[test]
fn stage_commands_emit_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = out.to_str().unwrap();
    for cmd in ["partition", "profiles", "cluster", "build-global"] {
        let res = logo(&with_synth(&[cmd, "--out", o, "--set", "K=2"]));
        assert!(
            res.status.success(),
            "{cmd}: {}",
            String::from_utf8_lossy(&res.stderr)
        );
    }
    let partition = read_json(&out.join("partition.json"));
    assert_eq!(partition["phases"].as_array().unwrap().len(), 3);
    let profiles = std::fs::read_to_string(out.join("profiles.jsonl")).unwrap();
    assert!(profiles
        .lines()
        .all(|l| serde_json::from_str::<Value>(l).is_ok()));
    assert!(!profiles.is_empty());
    assert!(out.join("community.json").exists());
    assert!(out.join("memories/community_0/manifest.json").exists());
    assert!(out.join("memories/community_1/manifest.json").exists());
}

#[test]
fn sweep_runs_each_value() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let res = logo(&with_synth(&[
        "sweep", "--axis", "T", "--values", "1,2", "--out", o,
    ]));
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert_eq!(json(&res)["runs"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("T=1/report.json").exists());
    assert!(dir.path().join("T=2/report.json").exists());
    assert!(dir.path().join("sweep.json").exists());
}
