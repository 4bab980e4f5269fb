//! Evaluation measures: accuracy / macro-F1, MAE / RMSE, ROUGE-1 / ROUGE-L,
//! and normalized-entropy diversity for labels and free text.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::community::{kmeans_points, CommunityError};
use crate::dataset::TaskKind;
use crate::embedding::{EmbeddingError, EmbeddingProvider};
use crate::mediator::PredictionOutcome;
use crate::retrieval::tokenize;

pub const DEFAULT_TEXT_CLUSTERS: usize = 8;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no outcomes to score")]
    Empty,
    #[error("degenerate label space: n = {0} (need at least 2)")]
    DegenerateLabelSpace(usize),
    #[error("distribution has no observations")]
    NoObservations,
    #[error("{observed} distinct labels exceed the label space of {n}")]
    TooManyLabels { observed: usize, n: usize },
    #[error("need at least 2 texts, got {0}")]
    TooFewTexts(usize),
    #[error("gold value {0:?} is not a number")]
    BadGold(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Community(#[from] CommunityError),
}

fn same_label(a: &str, b: &str) -> bool {
    a.trim().to_lowercase() == b.trim().to_lowercase()
}

pub fn accuracy(outcomes: &[PredictionOutcome]) -> Result<f64, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = outcomes
        .iter()
        .filter(|o| same_label(&o.prediction, &o.gold))
        .count();
    Ok(hits as f64 / outcomes.len() as f64)
}

/// Unweighted mean of per-label F1 over the whole label set; a label with
/// no predictions and no gold occurrences scores 0.
pub fn macro_f1(outcomes: &[PredictionOutcome], labels: &[String]) -> Result<f64, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    if labels.is_empty() {
        return Err(MetricError::DegenerateLabelSpace(0));
    }
    let total: f64 = labels
        .iter()
        .map(|label| {
            let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
            for o in outcomes {
                let pred = same_label(&o.prediction, label);
                let gold = same_label(&o.gold, label);
                match (pred, gold) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionScores {
    pub mae: f64,
    pub rmse: f64,
    pub invalid_rate: f64,
}

/// MAE and RMSE; unparsable predictions count as the range midpoint.
pub fn regression_scores(
    outcomes: &[PredictionOutcome],
    range: (f64, f64),
) -> Result<RegressionScores, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    let midpoint = (range.0 + range.1) / 2.0;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut invalid = 0usize;
    for o in outcomes {
        let gold: f64 = o
            .gold
            .trim()
            .parse()
            .map_err(|_| MetricError::BadGold(o.gold.clone()))?;
        let pred = match o
            .prediction
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
        {
            Some(v) if o.valid => v,
            _ => {
                invalid += 1;
                midpoint
            }
        };
        abs += (pred - gold).abs();
        sq += (pred - gold).powi(2);
    }
    let n = outcomes.len() as f64;
    Ok(RegressionScores {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        invalid_rate: invalid as f64 / n,
    })
}

pub fn mae(outcomes: &[PredictionOutcome], range: (f64, f64)) -> Result<f64, MetricError> {
    Ok(regression_scores(outcomes, range)?.mae)
}

pub fn rmse(outcomes: &[PredictionOutcome], range: (f64, f64)) -> Result<f64, MetricError> {
    Ok(regression_scores(outcomes, range)?.rmse)
}

fn f1(overlap: usize, pred_len: usize, gold_len: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred_len as f64;
    let r = overlap as f64 / gold_len as f64;
    2.0 * p * r / (p + r)
}

/// Unigram-overlap F1 with clipped counts.
pub fn rouge1(pred: &str, gold: &str) -> f64 {
    let p = tokenize(pred);
    let g = tokenize(gold);
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f1(overlap, p.len(), g.len())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 (β = 1).
pub fn rouge_l(pred: &str, gold: &str) -> f64 {
    let p = tokenize(pred);
    let g = tokenize(gold);
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    f1(lcs_len(&p, &g), p.len(), g.len())
}

/// Prediction counts over a fixed label space of size `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub counts: BTreeMap<String, u64>,
    pub n: usize,
}

impl LabelDistribution {
    pub fn new(n: usize) -> Self {
        Self {
            counts: BTreeMap::new(),
            n,
        }
    }

    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a str>, n: usize) -> Self {
        let mut d = Self::new(n);
        for l in labels {
            d.add(l);
        }
        d
    }

    pub fn add(&mut self, label: &str) {
        *self.counts.entry(label.to_string()).or_default() += 1;
    }

    pub fn m(&self) -> u64 {
        self.counts.values().sum()
    }

    fn check(&self) -> Result<(), MetricError> {
        if self.n < 2 {
            return Err(MetricError::DegenerateLabelSpace(self.n));
        }
        if self.m() == 0 {
            return Err(MetricError::NoObservations);
        }
        let observed = self.counts.values().filter(|c| **c > 0).count();
        if observed > self.n {
            return Err(MetricError::TooManyLabels {
                observed,
                n: self.n,
            });
        }
        Ok(())
    }
}

/// `H(P) / log n` with logarithms in `base`; the ratio does not depend on it.
pub fn diversity_base(dist: &LabelDistribution, base: f64) -> Result<f64, MetricError> {
    dist.check()?;
    let m = dist.m() as f64;
    let h: f64 = dist
        .counts
        .values()
        .filter(|c| **c > 0)
        .map(|&c| {
            let p = c as f64 / m;
            -p * p.log(base)
        })
        .sum();
    // adding 0.0 turns the -0.0 of a point mass into 0.0
    Ok((h / (dist.n as f64).log(base)).clamp(0.0, 1.0) + 0.0)
}

/// Normalized entropy of the distribution, natural log.
pub fn diversity(dist: &LabelDistribution) -> Result<f64, MetricError> {
    dist.check()?;
    let m = dist.m() as f64;
    let h: f64 = dist
        .counts
        .values()
        .filter(|c| **c > 0)
        .map(|&c| {
            let p = c as f64 / m;
            -p * p.ln()
        })
        .sum();
    Ok((h / (dist.n as f64).ln()).clamp(0.0, 1.0) + 0.0)
}

/// Diversity of free text: embed, cluster with k-means, then score the
/// cluster-size distribution with `n = K`.
pub fn text_diversity(
    texts: &[String],
    provider: &dyn EmbeddingProvider,
    k_clusters: usize,
    seed: u64,
) -> Result<f64, MetricError> {
    if texts.len() < 2 {
        return Err(MetricError::TooFewTexts(texts.len()));
    }
    let k = k_clusters.min(texts.len());
    if k < 2 {
        return Err(MetricError::DegenerateLabelSpace(k));
    }
    let points = texts
        .iter()
        .map(|t| provider.embed(t).map(|v| v.into_values()))
        .collect::<Result<Vec<_>, _>>()?;
    let clustering = kmeans_points(&points, k, seed, 100)?;
    let mut dist = LabelDistribution::new(k);
    for l in clustering.labels {
        dist.add(&l.to_string());
    }
    diversity(&dist)
}

/// Metric values for one group of outcomes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub metrics: BTreeMap<String, f64>,
    pub per_user: BTreeMap<String, BTreeMap<String, f64>>,
    pub invalid_prediction_rate: f64,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Options for per-user diversity on generation tasks.
#[derive(Clone, Copy)]
pub struct TextDiversity<'a> {
    pub provider: &'a dyn EmbeddingProvider,
    pub k_clusters: usize,
    pub seed: u64,
}

fn group_by_user(outcomes: &[PredictionOutcome]) -> BTreeMap<&str, Vec<&PredictionOutcome>> {
    let mut by_user: BTreeMap<&str, Vec<&PredictionOutcome>> = BTreeMap::new();
    for o in outcomes {
        by_user.entry(o.user_id.as_str()).or_default().push(o);
    }
    by_user
}

fn owned(outcomes: &[&PredictionOutcome]) -> Vec<PredictionOutcome> {
    outcomes.iter().map(|o| (*o).clone()).collect()
}

/// Task metrics over all outcomes plus per-user values. `diversity` is the
/// mean over users of their prediction diversity.
pub fn evaluate(
    outcomes: &[PredictionOutcome],
    task: &TaskKind,
    text: Option<TextDiversity<'_>>,
) -> Result<MetricReport, MetricError> {
    if outcomes.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut report = MetricReport {
        count: outcomes.len(),
        invalid_prediction_rate: outcomes.iter().filter(|o| !o.valid).count() as f64
            / outcomes.len() as f64,
        ..Default::default()
    };
    let score = |group: &[PredictionOutcome]| -> Result<BTreeMap<String, f64>, MetricError> {
        let mut m = BTreeMap::new();
        match task {
            TaskKind::Classification { labels } => {
                m.insert("accuracy".into(), accuracy(group)?);
                m.insert("macro_f1".into(), macro_f1(group, labels)?);
                let valid = group
                    .iter()
                    .filter(|o| o.valid)
                    .map(|o| o.prediction.as_str());
                let dist = LabelDistribution::from_labels(valid, labels.len());
                if dist.m() > 0 {
                    m.insert("diversity".into(), diversity(&dist)?);
                }
            }
            TaskKind::Regression { min, max } => {
                let s = regression_scores(group, (*min, *max))?;
                m.insert("mae".into(), s.mae);
                m.insert("rmse".into(), s.rmse);
            }
            TaskKind::Generation => {
                let n = group.len() as f64;
                m.insert(
                    "rouge1".into(),
                    group
                        .iter()
                        .map(|o| rouge1(&o.prediction, &o.gold))
                        .sum::<f64>()
                        / n,
                );
                m.insert(
                    "rougeL".into(),
                    group
                        .iter()
                        .map(|o| rouge_l(&o.prediction, &o.gold))
                        .sum::<f64>()
                        / n,
                );
                if let Some(td) = text {
                    if group.len() >= 2 {
                        let texts: Vec<String> =
                            group.iter().map(|o| o.prediction.clone()).collect();
                        m.insert(
                            "diversity".into(),
                            text_diversity(&texts, td.provider, td.k_clusters, td.seed)?,
                        );
                    }
                }
            }
        }
        Ok(m)
    };

    let overall = score(outcomes)?;
    for (user, group) in group_by_user(outcomes) {
        report
            .per_user
            .insert(user.to_string(), score(&owned(&group))?);
    }
    report.metrics = overall;
    // replace the pooled diversity with the per-user mean
    report.metrics.remove("diversity");
    let divs: Vec<f64> = report
        .per_user
        .values()
        .filter_map(|m| m.get("diversity").copied())
        .collect();
    if !divs.is_empty() {
        report.metrics.insert(
            "diversity".into(),
            divs.iter().sum::<f64>() / divs.len() as f64,
        );
    }
    report.metrics.insert(
        "invalid_prediction_rate".into(),
        report.invalid_prediction_rate,
    );
    if let (Some(mae), Some(rmse)) = (report.get("mae"), report.get("rmse")) {
        debug_assert!(mae <= rmse + 1e-12);
    }
    Ok(report)
}
