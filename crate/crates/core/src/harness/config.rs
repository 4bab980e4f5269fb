use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::synthetic::SyntheticSpec;
use super::HarnessError;
use crate::dataset::TaskDescriptor;
use crate::embedding::ProviderConfig;
use crate::llm::BackendConfig;
use crate::mediator::{InferenceConfig, LocalMode};
use crate::temporal::PartitionMode;

/// Which users are evaluated; everyone else forms the pool that builds the
/// global memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case")]
pub enum EvalSelection {
    TopActive { count: usize },
    Prefix { prefix: String },
    Users { ids: Vec<String> },
}

impl Default for EvalSelection {
    fn default() -> Self {
        EvalSelection::TopActive { count: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// JSONL dataset; ignored when `synthetic` is set.
    pub dataset: Option<PathBuf>,
    pub task: Option<TaskDescriptor>,
    pub synthetic: Option<SyntheticSpec>,
    pub eval_users: EvalSelection,
    /// Trailing share of each eval user's history held out as queries.
    pub holdout_fraction: f64,
    /// Activity quantile used for the bottom/top splits.
    pub activity_fraction: f64,
    #[serde(rename = "T")]
    pub phases: usize,
    pub partition_mode: PartitionMode,
    pub k_retrieve: usize,
    /// Number of communities; 1 means a single population memory.
    #[serde(rename = "K")]
    pub communities: usize,
    pub community_routing: bool,
    pub kmeans_max_iter: usize,
    pub local_mode: LocalMode,
    pub use_global: bool,
    pub template_id: String,
    /// Directory holding a custom template set, registered under `template_id`.
    pub templates_dir: Option<PathBuf>,
    pub max_items: usize,
    pub history_budget: usize,
    pub profile_cap: usize,
    pub global_prompt_budget: usize,
    /// Keep only the n most recent local records of each eval user.
    pub history_cap: Option<usize>,
    /// Build the global memory from m sampled pool users.
    pub user_sample: Option<usize>,
    /// Also score every intermediate global-memory phase.
    pub per_phase_eval: bool,
    pub text_clusters: usize,
    pub max_tokens: u32,
    pub temperature: f64,
    pub backend: BackendConfig,
    pub embedding: ProviderConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            task: None,
            synthetic: None,
            eval_users: EvalSelection::default(),
            holdout_fraction: 0.2,
            activity_fraction: 0.25,
            phases: 5,
            partition_mode: PartitionMode::CountQuantile,
            k_retrieve: 1,
            communities: 1,
            community_routing: false,
            kmeans_max_iter: crate::community::DEFAULT_MAX_ITER,
            local_mode: LocalMode::Rag,
            use_global: true,
            template_id: "generic".into(),
            templates_dir: None,
            max_items: crate::global_memory::DEFAULT_MAX_ITEMS,
            history_budget: crate::profile::DEFAULT_HISTORY_BUDGET,
            profile_cap: crate::profile::DEFAULT_PROFILE_CAP,
            global_prompt_budget: crate::global_memory::DEFAULT_PROMPT_BUDGET,
            history_cap: None,
            user_sample: None,
            per_phase_eval: false,
            text_clusters: crate::metrics::DEFAULT_TEXT_CLUSTERS,
            max_tokens: 512,
            temperature: 0.0,
            backend: BackendConfig::default(),
            embedding: ProviderConfig::default(),
            seed: 42,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key=value` overrides; see [`set_path`].
    pub fn with_overrides<'a>(
        &self,
        overrides: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self, HarnessError> {
        let mut value =
            serde_json::to_value(self).map_err(|e| HarnessError::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("override {item:?} is not key=value"))
            })?;
            set_path(&mut value, key.trim(), raw)?;
        }
        serde_json::from_value(value).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            local_mode: self.local_mode,
            use_global: self.use_global,
            k_retrieve: self.k_retrieve,
            community_routing: self.community_routing,
            template_id: self.template_id.clone(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.dataset.is_none() && self.synthetic.is_none() {
            return bad("either dataset or synthetic must be set");
        }
        if self.dataset.is_some() && self.synthetic.is_none() && self.task.is_none() {
            return bad("a dataset needs a task descriptor");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction must lie in (0, 1)");
        }
        if !(self.activity_fraction > 0.0 && self.activity_fraction < 1.0) {
            return bad("activity_fraction must lie in (0, 1)");
        }
        if self.phases == 0 {
            return bad("T must be at least 1");
        }
        if self.communities == 0 {
            return bad("K must be at least 1");
        }
        if self.local_mode.retrieves() && self.k_retrieve == 0 {
            return bad("k_retrieve must be at least 1");
        }
        if self.history_cap == Some(0) {
            return bad("history_cap must be at least 1");
        }
        if self.max_items == 0 || self.kmeans_max_iter == 0 {
            return bad("max_items and kmeans_max_iter must be positive");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Per-module seed derived from the run seed.
    pub fn seed_for(&self, module: &str) -> u64 {
        derive_seed(self.seed, module)
    }
}

pub fn derive_seed(seed: u64, module: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(module.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Sets a dotted path inside a JSON document. The value is parsed as JSON
/// when possible and taken as a string otherwise; missing objects along the
/// path are created.
pub fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<(), HarnessError> {
    if key.is_empty() {
        return Err(HarnessError::Config("empty override key".into()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(HarnessError::Config(format!(
                    "{key}: {part:?} is not inside an object"
                )));
            }
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last part")
}
