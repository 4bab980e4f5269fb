//! k-means over profile vectors, and the user → community routing built on it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, InteractionRecord};
use crate::embedding::EmbeddingVector;

pub const DEFAULT_MAX_ITER: usize = 100;

#[derive(Debug, Error)]
pub enum CommunityError {
    #[error("K must be at least 1")]
    ZeroK,
    #[error("K = {k} exceeds the number of points ({n})")]
    TooFewPoints { k: usize, n: usize },
    #[error("max_iter must be at least 1")]
    ZeroIterations,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("user {0:?} has no community assignment")]
    Unassigned(String),
    #[error("inertia increased from {before} to {after} at iteration {iteration}")]
    NotMonotone {
        iteration: usize,
        before: f64,
        after: f64,
    },
    #[error("community model {path}: {message}")]
    Io { path: String, message: String },
}

/// Plain k-means result over indexed points.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; the lowest index wins ties.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn seed_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &points[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if *d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target above the final sum
            pick.unwrap_or_else(|| d2.iter().rposition(|d| *d > 0.0).expect("positive total"))
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

fn inertia_of(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &[usize]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is a
/// fixpoint or `max_iter` is reached. An empty cluster takes the point
/// farthest from its centroid.
pub fn kmeans_points(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<Clustering, CommunityError> {
    if k == 0 {
        return Err(CommunityError::ZeroK);
    }
    if k > points.len() {
        return Err(CommunityError::TooFewPoints { k, n: points.len() });
    }
    if max_iter == 0 {
        return Err(CommunityError::ZeroIterations);
    }
    let dim = points[0].len();
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(CommunityError::Dimension {
            expected: dim,
            got: p.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(points, k, &mut rng);
    let mut labels: Vec<usize> = Vec::new();
    let mut history: Vec<f64> = Vec::new();

    for iteration in 0..max_iter {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty(points, &mut centroids, &mut next, k);
        let converged = next == labels;
        labels = next;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        for (c, (sum, count)) in centroids.iter_mut().zip(sums.into_iter().zip(counts)) {
            if count > 0 {
                *c = sum.into_iter().map(|s| s / count as f64).collect();
            }
        }

        let inertia = inertia_of(points, &centroids, &labels);
        if let Some(&before) = history.last() {
            if inertia > before + 1e-9 * before.abs().max(1.0) {
                return Err(CommunityError::NotMonotone {
                    iteration,
                    before,
                    after: inertia,
                });
            }
        }
        history.push(inertia);
        if converged {
            break;
        }
    }
    let inertia = *history.last().expect("at least one iteration");
    Ok(Clustering {
        centroids,
        labels,
        inertia,
        history,
    })
}

fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], labels: &mut [usize], k: usize) {
    for _ in 0..k {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let (far, dist) = points
            .iter()
            .zip(labels.iter())
            .enumerate()
            .filter(|(_, (_, &l))| counts[l] > 1)
            .map(|(i, (p, &l))| (i, sq_dist(p, &centroids[l])))
            .fold(
                (usize::MAX, 0.0),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
        if far == usize::MAX || dist == 0.0 {
            return;
        }
        labels[far] = empty;
        centroids[empty] = points[far].clone();
    }
}

/// Users partitioned into K communities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityModel {
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: BTreeMap<String, usize>,
    pub inertia: f64,
    #[serde(default)]
    pub inertia_history: Vec<f64>,
}

pub fn kmeans(
    vectors: &BTreeMap<String, EmbeddingVector>,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<CommunityModel, CommunityError> {
    let points: Vec<Vec<f64>> = vectors.values().map(|v| v.values().to_vec()).collect();
    let c = kmeans_points(&points, k, seed, max_iter)?;
    Ok(CommunityModel {
        k,
        seed,
        centroids: c.centroids,
        assignment: vectors.keys().cloned().zip(c.labels).collect(),
        inertia: c.inertia,
        inertia_history: c.history,
    })
}

impl CommunityModel {
    pub fn dimension(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Nearest centroid by Euclidean distance, lowest index on ties.
    pub fn assign(&self, vector: &EmbeddingVector) -> Result<usize, CommunityError> {
        if vector.dimension() != self.dimension() {
            return Err(CommunityError::Dimension {
                expected: self.dimension(),
                got: vector.dimension(),
            });
        }
        Ok(nearest(vector.values(), &self.centroids).0)
    }

    pub fn community_of(&self, user_id: &str) -> Result<usize, CommunityError> {
        self.assignment
            .get(user_id)
            .copied()
            .ok_or_else(|| CommunityError::Unassigned(user_id.to_string()))
    }

    pub fn members(&self, community: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &c)| c == community)
            .map(|(u, _)| u.as_str())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CommunityError> {
        let io = |e: String| CommunityError::Io {
            path: path.display().to_string(),
            message: e,
        };
        let text = serde_json::to_string_pretty(self).map_err(|e| io(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CommunityError> {
        let io = |e: String| CommunityError::Io {
            path: path.display().to_string(),
            message: e,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }
}

/// Groups every record under its owner's community; all K communities are
/// present, possibly empty.
pub fn partition_records(
    dataset: &Dataset,
    model: &CommunityModel,
) -> Result<BTreeMap<usize, Vec<InteractionRecord>>, CommunityError> {
    let mut out: BTreeMap<usize, Vec<InteractionRecord>> =
        (0..model.k).map(|c| (c, Vec::new())).collect();
    for (user, history) in &dataset.users {
        let c = model.community_of(user)?;
        out.entry(c)
            .or_default()
            .extend(history.records.iter().cloned());
    }
    Ok(out)
}
