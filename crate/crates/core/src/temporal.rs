//! Chronological phase partitioning of pooled interaction histories.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::InteractionRecord;

#[derive(Debug, Error, PartialEq)]
pub enum TemporalError {
    #[error("cannot partition an empty record set")]
    Empty,
    #[error("phase count must be at least 1")]
    ZeroPhases,
    #[error("{phases} phases requested but only {records} records available")]
    TooManyPhases { phases: usize, records: usize },
    #[error("record {0:?} is not in the partition")]
    UnknownRecord(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Equal-volume phases over the globally sorted record stream.
    #[default]
    CountQuantile,
    /// Equal-duration phases over `[min_ts, max_ts]`.
    TimeSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePartition {
    #[serde(rename = "T")]
    pub t: usize,
    pub boundaries: Vec<f64>,
    pub phases: Vec<Vec<String>>,
}

impl PhasePartition {
    pub fn num_phases(&self) -> usize {
        self.t
    }

    pub fn phase_of(&self, record_id: &str) -> Result<usize, TemporalError> {
        self.phases
            .iter()
            .position(|p| p.iter().any(|id| id == record_id))
            .ok_or_else(|| TemporalError::UnknownRecord(record_id.to_string()))
    }

    /// record_id -> phase index, for bulk lookups.
    pub fn lookup(&self) -> HashMap<&str, usize> {
        self.phases
            .iter()
            .enumerate()
            .flat_map(|(t, ids)| ids.iter().map(move |id| (id.as_str(), t)))
            .collect()
    }
}

pub fn partition(
    records: &[InteractionRecord],
    t: usize,
    mode: PartitionMode,
) -> Result<PhasePartition, TemporalError> {
    if records.is_empty() {
        return Err(TemporalError::Empty);
    }
    if t == 0 {
        return Err(TemporalError::ZeroPhases);
    }
    let mut sorted: Vec<&InteractionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.order_key().cmp(&b.order_key()));

    match mode {
        PartitionMode::CountQuantile => {
            let n = sorted.len();
            if t > n {
                return Err(TemporalError::TooManyPhases {
                    phases: t,
                    records: n,
                });
            }
            // first `n % t` phases take one extra record
            let (base, extra) = (n / t, n % t);
            let mut phases = Vec::with_capacity(t);
            let mut start = 0;
            for i in 0..t {
                let len = base + usize::from(i < extra);
                phases.push(&sorted[start..start + len]);
                start += len;
            }
            let boundaries = phases
                .windows(2)
                .map(|w| {
                    let last = w[0].last().unwrap().timestamp as f64;
                    let first = w[1].first().unwrap().timestamp as f64;
                    (last + first) / 2.0
                })
                .collect();
            Ok(PhasePartition {
                t,
                boundaries,
                phases: phases
                    .into_iter()
                    .map(|p| p.iter().map(|r| r.record_id.clone()).collect())
                    .collect(),
            })
        }
        PartitionMode::TimeSpan => {
            let min = sorted.first().unwrap().timestamp as f64;
            let max = sorted.last().unwrap().timestamp as f64;
            let width = (max - min) / t as f64;
            let boundaries: Vec<f64> = (1..t).map(|i| min + width * i as f64).collect();
            let mut phases = vec![Vec::new(); t];
            for r in sorted {
                let ts = r.timestamp as f64;
                // records sitting exactly on a boundary belong to the earlier phase
                let idx = boundaries.partition_point(|b| *b < ts);
                phases[idx].push(r.record_id.clone());
            }
            Ok(PhasePartition {
                t,
                boundaries,
                phases,
            })
        }
    }
}
