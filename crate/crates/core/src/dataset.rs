//! Canonical data model: interaction records, per-user histories, and the
//! population slicing used by every experiment protocol.
//!
//! Datasets are stored as JSONL, one [`InteractionRecord`] per line. A
//! separate task descriptor states whether labels are classes, bounded
//! numbers, or free text.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate record_id {0:?}")]
    DuplicateRecord(String),
    #[error("record {record_id:?}: label {label:?} is not in the label set")]
    LabelNotInSet { record_id: String, label: String },
    #[error("record {record_id:?}: label {label:?} is outside [{min}, {max}]")]
    LabelOutOfRange {
        record_id: String,
        label: String,
        min: f64,
        max: f64,
    },
    #[error("record {record_id:?}: {message}")]
    InvalidRecord { record_id: String, message: String },
    #[error("invalid task descriptor: {0}")]
    Task(String),
    #[error("requested {requested} users but the dataset has {available}")]
    NotEnoughUsers { requested: usize, available: usize },
    #[error("fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("dataset has no users")]
    EmptyDataset,
    #[error("history cap must be at least 1")]
    BadCap,
}

/// One (query, response, timestamp) event for a user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub record_id: String,
    pub query: String,
    pub response: String,
    pub timestamp: i64,
    #[serde(default)]
    pub label: Option<String>,
}

impl InteractionRecord {
    /// Gold answer used for evaluation: the label when present, else the response.
    pub fn gold(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.response)
    }

    /// Chronological sort key shared by every module.
    pub fn order_key(&self) -> (i64, &str) {
        (self.timestamp, self.record_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user_id: String,
    pub records: Vec<InteractionRecord>,
}

impl UserHistory {
    /// Builds a history, sorting records by `(timestamp, record_id)`.
    pub fn new(user_id: impl Into<String>, mut records: Vec<InteractionRecord>) -> Self {
        records.sort_by(|a, b| a.order_key().cmp(&b.order_key()));
        Self {
            user_id: user_id.into(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records strictly before `timestamp`.
    pub fn before(&self, timestamp: i64) -> &[InteractionRecord] {
        let end = self.records.partition_point(|r| r.timestamp < timestamp);
        &self.records[..end]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskKind {
    Classification { labels: Vec<String> },
    Regression { min: f64, max: f64 },
    Generation,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Classification { .. } => "classification",
            TaskKind::Regression { .. } => "regression",
            TaskKind::Generation => "generation",
        }
    }

    fn check_label(&self, record: &InteractionRecord) -> Result<(), DataError> {
        let Some(label) = record.label.as_deref() else {
            return Ok(());
        };
        match self {
            TaskKind::Classification { labels } => {
                if labels.iter().any(|l| l == label) {
                    Ok(())
                } else {
                    Err(DataError::LabelNotInSet {
                        record_id: record.record_id.clone(),
                        label: label.to_string(),
                    })
                }
            }
            TaskKind::Regression { min, max } => match label.trim().parse::<f64>() {
                Ok(v) if v >= *min && v <= *max => Ok(()),
                _ => Err(DataError::LabelOutOfRange {
                    record_id: record.record_id.clone(),
                    label: label.to_string(),
                    min: *min,
                    max: *max,
                }),
            },
            TaskKind::Generation => Ok(()),
        }
    }
}

/// On-disk task descriptor:
/// `{"task_kind": "classification", "labels": [...]}` or
/// `{"task_kind": "regression", "range": [min, max]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub task_kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
}

impl TryFrom<&TaskDescriptor> for TaskKind {
    type Error = DataError;

    fn try_from(desc: &TaskDescriptor) -> Result<Self, Self::Error> {
        match desc.task_kind.as_str() {
            "classification" => {
                let labels = desc
                    .labels
                    .clone()
                    .ok_or_else(|| DataError::Task("classification requires labels".into()))?;
                if labels.len() < 2 {
                    return Err(DataError::Task(
                        "label set needs at least two labels".into(),
                    ));
                }
                let distinct: HashSet<&String> = labels.iter().collect();
                if distinct.len() != labels.len() {
                    return Err(DataError::Task("label set contains duplicates".into()));
                }
                Ok(TaskKind::Classification { labels })
            }
            "regression" => {
                let [min, max] = desc
                    .range
                    .ok_or_else(|| DataError::Task("regression requires range".into()))?;
                if !(min.is_finite() && max.is_finite() && min < max) {
                    return Err(DataError::Task(format!("bad range [{min}, {max}]")));
                }
                Ok(TaskKind::Regression { min, max })
            }
            "generation" => Ok(TaskKind::Generation),
            other => Err(DataError::Task(format!("unknown task_kind {other:?}"))),
        }
    }
}

impl From<&TaskKind> for TaskDescriptor {
    fn from(kind: &TaskKind) -> Self {
        match kind {
            TaskKind::Classification { labels } => TaskDescriptor {
                task_kind: "classification".into(),
                labels: Some(labels.clone()),
                range: None,
            },
            TaskKind::Regression { min, max } => TaskDescriptor {
                task_kind: "regression".into(),
                labels: None,
                range: Some([*min, *max]),
            },
            TaskKind::Generation => TaskDescriptor {
                task_kind: "generation".into(),
                labels: None,
                range: None,
            },
        }
    }
}

impl TaskDescriptor {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DataError::Task(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub users: BTreeMap<String, UserHistory>,
}

impl Dataset {
    /// Validates records and groups them into sorted per-user histories.
    pub fn from_records(
        task: TaskKind,
        records: impl IntoIterator<Item = InteractionRecord>,
    ) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        let mut grouped: BTreeMap<String, Vec<InteractionRecord>> = BTreeMap::new();
        for record in records {
            validate_record(&task, &record)?;
            if !seen.insert(record.record_id.clone()) {
                return Err(DataError::DuplicateRecord(record.record_id));
            }
            grouped
                .entry(record.user_id.clone())
                .or_default()
                .push(record);
        }
        let users = grouped
            .into_iter()
            .map(|(uid, recs)| (uid.clone(), UserHistory::new(uid, recs)))
            .collect();
        Ok(Self { task, users })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_records(&self) -> usize {
        self.users.values().map(UserHistory::len).sum()
    }

    /// All records across users, in user order then chronological order.
    pub fn records(&self) -> impl Iterator<Item = &InteractionRecord> {
        self.users.values().flat_map(|h| h.records.iter())
    }

    fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a String>) -> Dataset {
        let users = ids
            .into_iter()
            .map(|id| (id.clone(), self.users[id].clone()))
            .collect();
        Dataset {
            task: self.task.clone(),
            users,
        }
    }

    /// User ids ordered by activity (record count) descending, ties by id ascending.
    fn by_activity_desc(&self) -> Vec<&String> {
        let mut ids: Vec<&String> = self.users.keys().collect();
        ids.sort_by(|a, b| {
            self.users[*b]
                .len()
                .cmp(&self.users[*a].len())
                .then_with(|| a.cmp(b))
        });
        ids
    }

    /// Writes the dataset in canonical JSONL form.
    pub fn write_jsonl(&self, out: &mut impl Write) -> std::io::Result<()> {
        for record in self.records() {
            serde_json::to_writer(&mut *out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn validate_record(task: &TaskKind, record: &InteractionRecord) -> Result<(), DataError> {
    let invalid = |message: &str| DataError::InvalidRecord {
        record_id: record.record_id.clone(),
        message: message.to_string(),
    };
    if record.record_id.is_empty() {
        return Err(invalid("record_id is empty"));
    }
    if record.query.trim().is_empty() {
        return Err(invalid("query is empty"));
    }
    if record.timestamp < 0 {
        return Err(invalid("timestamp is negative"));
    }
    task.check_label(record)
}

/// Parses JSONL from a reader. Line numbers in errors are 1-based.
pub fn parse_dataset(reader: impl BufRead, task: TaskKind) -> Result<Dataset, DataError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: InteractionRecord =
            serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        records.push(record);
    }
    Dataset::from_records(task, records)
}

pub fn load_dataset(path: &Path, task: TaskKind) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(BufReader::new(file), task)
}

/// Splits into the `count` most active users and the remaining pool.
pub fn select_top_active(dataset: &Dataset, count: usize) -> Result<(Dataset, Dataset), DataError> {
    if count > dataset.num_users() {
        return Err(DataError::NotEnoughUsers {
            requested: count,
            available: dataset.num_users(),
        });
    }
    let ranked = dataset.by_activity_desc();
    let (top, rest) = ranked.split_at(count);
    Ok((
        dataset.subset(top.iter().copied()),
        dataset.subset(rest.iter().copied()),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivitySide {
    Bottom,
    Top,
}

/// The `ceil(fraction * users)` least (bottom) or most (top) active users.
pub fn split_by_activity_quantile(
    dataset: &Dataset,
    fraction: f64,
    side: ActivitySide,
) -> Result<Dataset, DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::BadFraction(fraction));
    }
    if dataset.users.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let n = dataset.num_users();
    let take = ((fraction * n as f64).ceil() as usize).min(n);
    let mut ids: Vec<&String> = dataset.users.keys().collect();
    match side {
        ActivitySide::Top => ids = dataset.by_activity_desc(),
        ActivitySide::Bottom => ids.sort_by(|a, b| {
            dataset.users[*a]
                .len()
                .cmp(&dataset.users[*b].len())
                .then_with(|| a.cmp(b))
        }),
    }
    Ok(dataset.subset(ids.into_iter().take(take)))
}

/// Keeps each user's `n` most recent records.
pub fn cap_history(dataset: &Dataset, n: usize) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::BadCap);
    }
    let users = dataset
        .users
        .iter()
        .map(|(id, h)| {
            let start = h.records.len().saturating_sub(n);
            (
                id.clone(),
                UserHistory {
                    user_id: h.user_id.clone(),
                    records: h.records[start..].to_vec(),
                },
            )
        })
        .collect();
    Ok(Dataset {
        task: dataset.task.clone(),
        users,
    })
}

/// Deterministic pseudo-random subset of `m` users.
pub fn sample_users(dataset: &Dataset, m: usize, seed: u64) -> Result<Dataset, DataError> {
    let n = dataset.num_users();
    if m > n {
        return Err(DataError::NotEnoughUsers {
            requested: m,
            available: n,
        });
    }
    let ids: Vec<&String> = dataset.users.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, m).into_vec();
    picked.sort_unstable();
    Ok(dataset.subset(picked.into_iter().map(|i| ids[i])))
}
