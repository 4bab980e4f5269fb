//! Synthetic oracle datasets with planted community structure.
//!
//! Each community owns a disjoint tag vocabulary with one majority tag.
//! Pool users have short histories dominated by the majority tag. Eval users
//! come in three activity tiers:
//!
//! * `eval-cold-*`: a single record whose gold tag is the community majority,
//!   so it is held out and their local memory is empty;
//! * `eval-mid-*`: a few records drawn like pool users;
//! * `eval-active-*`: long histories skewed to a personal tag, while their
//!   held-out queries mix the personal and the majority tag.
//!
//! Queries carry community topic words, and with some probability a cue
//! word of their tag.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::dataset::{Dataset, InteractionRecord, TaskKind};

const TAGS: &[&str] = &[
    "action",
    "thriller",
    "crime",
    "war",
    "romance",
    "comedy",
    "musical",
    "family",
    "horror",
    "mystery",
    "western",
    "fantasy",
    "animation",
    "documentary",
    "history",
    "sport",
];

const TOPICS: &[&[&str]] = &[
    &[
        "heist",
        "agent",
        "pursuit",
        "explosion",
        "soldier",
        "detective",
        "weapon",
        "escape",
        "mission",
        "gang",
    ],
    &[
        "wedding",
        "love",
        "friendship",
        "holiday",
        "dance",
        "song",
        "letter",
        "village",
        "summer",
        "reunion",
    ],
    &[
        "haunted", "ghost", "secret", "curse", "forest", "night", "stranger", "island", "ritual",
        "shadow",
    ],
    &[
        "dragon", "kingdom", "robot", "planet", "wizard", "voyage", "legend", "empire", "machine",
        "quest",
    ],
];

const FILLER: &[&str] = &[
    "story",
    "film",
    "follows",
    "young",
    "old",
    "city",
    "family",
    "days",
    "years",
    "world",
    "life",
    "discovers",
    "finds",
    "must",
    "after",
    "before",
    "during",
    "into",
    "through",
    "against",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub communities: usize,
    pub labels_per_community: usize,
    pub pool_users_per_community: usize,
    /// Inclusive range of pool history lengths.
    pub pool_history: [usize; 2],
    /// Probability that a pool or mid record carries the majority tag.
    pub majority_share: f64,
    pub cold_users: usize,
    pub mid_users: usize,
    pub mid_history: [usize; 2],
    pub active_users: usize,
    pub active_history: [usize; 2],
    /// Probability that an active user's past record carries their personal tag.
    pub active_bias_share: f64,
    /// Probability that an active user's held-out record carries the majority tag.
    pub active_eval_majority_share: f64,
    /// Share of the history held out for active and mid users; the tail is
    /// generated from the held-out distribution.
    pub holdout_fraction: f64,
    pub topic_words: usize,
    pub filler_words: usize,
    /// Probability that a query contains a cue word of its tag.
    pub cue_rate: f64,
    pub time_horizon: i64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            communities: 2,
            labels_per_community: 4,
            pool_users_per_community: 30,
            pool_history: [1, 4],
            majority_share: 0.8,
            cold_users: 8,
            mid_users: 16,
            mid_history: [4, 8],
            active_users: 8,
            active_history: [25, 40],
            active_bias_share: 0.75,
            active_eval_majority_share: 0.5,
            holdout_fraction: 0.2,
            topic_words: 5,
            filler_words: 2,
            cue_rate: 0.8,
            time_horizon: 1_000_000,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(format!("synthetic spec: {m}")));
        if self.communities == 0 || self.communities > TOPICS.len() {
            return bad(format!("communities must lie in 1..={}", TOPICS.len()));
        }
        if self.labels_per_community < 2
            || self.communities * self.labels_per_community > TAGS.len()
        {
            return bad(format!(
                "need 2 <= labels_per_community and communities x labels <= {}",
                TAGS.len()
            ));
        }
        for (name, [lo, hi]) in [
            ("pool_history", self.pool_history),
            ("mid_history", self.mid_history),
            ("active_history", self.active_history),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!(
                    "{name} must be a non-empty range of positive lengths"
                ));
            }
        }
        for (name, p) in [
            ("majority_share", self.majority_share),
            ("active_bias_share", self.active_bias_share),
            (
                "active_eval_majority_share",
                self.active_eval_majority_share,
            ),
            ("cue_rate", self.cue_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction must lie in (0, 1)".into());
        }
        if self.time_horizon < 1 {
            return bad("time_horizon must be positive".into());
        }
        Ok(())
    }

    /// Tag vocabulary of community `c`; the first tag is its majority.
    pub fn community_labels(&self, c: usize) -> Vec<String> {
        let k = self.labels_per_community;
        TAGS[c * k..(c + 1) * k]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn majority_label(&self, c: usize) -> String {
        self.community_labels(c)[0].clone()
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.communities)
            .flat_map(|c| self.community_labels(c))
            .collect()
    }

    /// Personal tag of the i-th active user of community `c`.
    pub fn personal_label(&self, c: usize, i: usize) -> String {
        let labels = self.community_labels(c);
        labels[1 + i % (labels.len() - 1)].clone()
    }
}

/// Cue word of a tag, e.g. `actcue` for `action`.
pub fn cue_word(label: &str) -> String {
    let stem: String = label.chars().take(3).collect();
    format!("{stem}cue")
}

struct Gen<'a> {
    spec: &'a SyntheticSpec,
    rng: ChaCha8Rng,
    records: Vec<InteractionRecord>,
}

impl Gen<'_> {
    fn query(&mut self, community: usize, label: &str) -> String {
        let mut words: Vec<String> = Vec::new();
        for _ in 0..self.spec.topic_words {
            words.push(
                TOPICS[community]
                    .choose(&mut self.rng)
                    .expect("non-empty")
                    .to_string(),
            );
        }
        for _ in 0..self.spec.filler_words {
            words.push(FILLER.choose(&mut self.rng).expect("non-empty").to_string());
        }
        if self.rng.random_bool(self.spec.cue_rate) {
            words.push(cue_word(label));
        }
        let n = words.len();
        for i in (1..n).rev() {
            let j = self.rng.random_range(0..=i);
            words.swap(i, j);
        }
        words.join(" ")
    }

    fn mixed_label(&mut self, community: usize) -> String {
        let labels = self.spec.community_labels(community);
        if self.rng.random_bool(self.spec.majority_share) {
            labels[0].clone()
        } else {
            labels[1..]
                .choose(&mut self.rng)
                .expect("non-empty")
                .clone()
        }
    }

    fn timestamps(&mut self, n: usize) -> Vec<i64> {
        let mut ts: Vec<i64> = (0..n)
            .map(|_| self.rng.random_range(0..self.spec.time_horizon))
            .collect();
        ts.sort_unstable();
        ts
    }

    fn user(&mut self, user_id: &str, community: usize, labels: Vec<String>) {
        let ts = self.timestamps(labels.len());
        for (i, (label, t)) in labels.into_iter().zip(ts).enumerate() {
            let query = self.query(community, &label);
            self.records.push(InteractionRecord {
                user_id: user_id.to_string(),
                record_id: format!("{user_id}-r{i:03}"),
                query,
                response: label.clone(),
                timestamp: t,
                label: Some(label),
            });
        }
    }

    fn length(&mut self, range: [usize; 2]) -> usize {
        self.rng.random_range(range[0]..=range[1])
    }
}

fn eval_split(len: usize, fraction: f64) -> usize {
    ((len as f64 * fraction).ceil() as usize).clamp(1, len)
}

/// Deterministic dataset for `(spec, seed)`.
pub fn make_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Dataset, HarnessError> {
    spec.validate()?;
    let mut g = Gen {
        spec,
        rng: ChaCha8Rng::seed_from_u64(seed),
        records: Vec::new(),
    };
    for c in 0..spec.communities {
        for i in 0..spec.pool_users_per_community {
            let n = g.length(spec.pool_history);
            let labels = (0..n).map(|_| g.mixed_label(c)).collect();
            g.user(&format!("pool-c{c}-u{i:03}"), c, labels);
        }
    }
    for i in 0..spec.cold_users {
        let c = i % spec.communities;
        g.user(
            &format!("eval-cold-{i:03}"),
            c,
            vec![spec.majority_label(c)],
        );
    }
    for i in 0..spec.mid_users {
        let c = i % spec.communities;
        let n = g.length(spec.mid_history);
        let labels = (0..n).map(|_| g.mixed_label(c)).collect();
        g.user(&format!("eval-mid-{i:03}"), c, labels);
    }
    for i in 0..spec.active_users {
        let c = i % spec.communities;
        let personal = spec.personal_label(c, i / spec.communities);
        let majority = spec.majority_label(c);
        let n = g.length(spec.active_history);
        let held = eval_split(n, spec.holdout_fraction);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n - held {
            let label = if g.rng.random_bool(spec.active_bias_share) {
                personal.clone()
            } else {
                g.mixed_label(c)
            };
            labels.push(label);
        }
        for _ in 0..held {
            let p = spec.active_eval_majority_share;
            labels.push(if g.rng.random_bool(p) {
                majority.clone()
            } else {
                personal.clone()
            });
        }
        g.user(&format!("eval-active-{i:03}"), c, labels);
    }
    let task = TaskKind::Classification {
        labels: spec.labels(),
    };
    Dataset::from_records(task, g.records)
        .map_err(|e| HarnessError::Config(format!("synthetic dataset: {e}")))
}

/// Community each synthetic user was generated in, parsed from the id.
pub fn planted_community(spec: &SyntheticSpec, user_id: &str) -> Option<usize> {
    if let Some(rest) = user_id.strip_prefix("pool-c") {
        return rest.split('-').next()?.parse().ok();
    }
    let idx: usize = user_id.rsplit('-').next()?.parse().ok()?;
    user_id
        .starts_with("eval-")
        .then_some(idx % spec.communities)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_bytes() {
        let spec = SyntheticSpec::default();
        let mut a = Vec::new();
        let mut b = Vec::new();
        make_synthetic_dataset(&spec, 5)
            .unwrap()
            .write_jsonl(&mut a)
            .unwrap();
        make_synthetic_dataset(&spec, 5)
            .unwrap()
            .write_jsonl(&mut b)
            .unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        make_synthetic_dataset(&spec, 6)
            .unwrap()
            .write_jsonl(&mut c)
            .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tiers_have_expected_shape() {
        let spec = SyntheticSpec::default();
        let d = make_synthetic_dataset(&spec, 1).unwrap();
        let cold: Vec<_> = d
            .users
            .values()
            .filter(|h| h.user_id.starts_with("eval-cold"))
            .collect();
        assert_eq!(cold.len(), spec.cold_users);
        for h in cold {
            assert_eq!(h.len(), 1);
            let c = planted_community(&spec, &h.user_id).unwrap();
            assert_eq!(h.records[0].gold(), spec.majority_label(c));
        }
        let active = d
            .users
            .values()
            .filter(|h| h.user_id.starts_with("eval-active"))
            .count();
        assert_eq!(active, spec.active_users);
        let pool = d.users.keys().filter(|u| u.starts_with("pool-")).count();
        assert_eq!(pool, spec.communities * spec.pool_users_per_community);
    }

    #[test]
    fn labels_stay_in_their_community() {
        let spec = SyntheticSpec::default();
        let d = make_synthetic_dataset(&spec, 2).unwrap();
        for r in d.records() {
            let c = planted_community(&spec, &r.user_id).unwrap();
            assert!(
                spec.community_labels(c).contains(&r.gold().to_string()),
                "{}",
                r.record_id
            );
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let spec = SyntheticSpec {
            communities: 5,
            ..Default::default()
        };
        assert!(make_synthetic_dataset(&spec, 0).is_err());
        let spec = SyntheticSpec {
            pool_history: [3, 1],
            ..Default::default()
        };
        assert!(make_synthetic_dataset(&spec, 0).is_err());
    }
}
