//! Experiment runner: wires every module into one pipeline, persists its
//! artifacts, and sweeps single configuration axes.

mod config;
mod pipeline;
mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::metrics::MetricReport;

pub use config::{derive_seed, set_path, EvalSelection, ExperimentConfig};
pub use pipeline::{
    build_client, holdout, load_data, pool_profiles, run_pipeline, run_pipeline_with, select_eval,
    write_outcomes, PipelineRun, ProfileTrace, ProfilesByPhase,
};
pub use synthetic::{cue_word, make_synthetic_dataset, planted_community, SyntheticSpec};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
        /// Manifest listing the artifacts written before the failure.
        manifest: Option<PathBuf>,
    },
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

/// Run provenance; the only part of a report that changes between reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub code_version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub stages: Vec<String>,
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub task: String,
    /// `overall`, `bottom_<q>`, `top_<q>` where q is the activity percentile.
    pub splits: BTreeMap<String, MetricReport>,
    pub split_users: BTreeMap<String, Vec<String>>,
    pub counts: BTreeMap<String, usize>,
    /// Phase-by-phase cosine similarity per global memory.
    pub phase_similarity: BTreeMap<String, Vec<Vec<f64>>>,
    /// SHA-256 of each memory's final text.
    pub memory_digests: BTreeMap<String, String>,
    /// Scores when serving the memory of each phase in turn.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_phase: Vec<BTreeMap<String, MetricReport>>,
}

impl EvalReport {
    pub fn metric(&self, split: &str, name: &str) -> Option<f64> {
        self.splits.get(split).and_then(|r| r.get(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    #[serde(rename = "T")]
    T,
    KRetrieve,
    #[serde(rename = "K")]
    K,
    HistoryCap,
    UserSample,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::T => "T",
            SweepAxis::KRetrieve => "k_retrieve",
            SweepAxis::K => "K",
            SweepAxis::HistoryCap => "history_cap",
            SweepAxis::UserSample => "user_sample",
        }
    }

    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| HarnessError::Config(format!("unknown sweep axis {s:?}")))
    }
}

/// One pipeline run per value; `null` lifts an optional cap. Runs share the
/// backend config, so a replay cache is reused across them.
pub fn run_sweep(
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[Value],
    out: Option<&Path>,
) -> Result<Vec<(Value, EvalReport)>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config(
            "sweep needs at least one value".into(),
        ));
    }
    let mut reports = Vec::with_capacity(values.len());
    for value in values {
        let mut json =
            serde_json::to_value(config).map_err(|e| HarnessError::Config(e.to_string()))?;
        json[axis.key()] = value.clone();
        let run_config: ExperimentConfig = serde_json::from_value(json)
            .map_err(|e| HarnessError::Config(format!("{}={value}: {e}", axis.key())))?;
        let dir = out.map(|o| o.join(format!("{}={}", axis.key(), value_label(value))));
        let run = run_pipeline(&run_config, dir.as_deref())?;
        reports.push((value.clone(), run.report));
    }
    if let Some(out) = out {
        let index: Vec<Value> = reports
            .iter()
            .map(|(v, r)| serde_json::json!({ "value": v, "dir": format!("{}={}", axis.key(), value_label(v)), "splits": r.splits.keys().collect::<Vec<_>>() }))
            .collect();
        let text =
            serde_json::to_string_pretty(&serde_json::json!({ "axis": axis.key(), "runs": index }))
                .map_err(|e| HarnessError::Config(e.to_string()))?;
        std::fs::write(out.join("sweep.json"), text).map_err(|e| HarnessError::Stage {
            stage: "persist",
            message: e.to_string(),
            manifest: None,
        })?;
    }
    Ok(reports)
}

fn value_label(v: &Value) -> String {
    match v {
        Value::Null => "all".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
