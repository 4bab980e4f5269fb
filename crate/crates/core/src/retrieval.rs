//! Okapi BM25 over a single user's history.
//!
//! IDF uses the smoothed form `ln((N - df + 0.5) / (df + 0.5) + 1)`, which
//! stays positive on tiny corpora. Query terms are deduplicated before
//! scoring, so a repeated query term counts once.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::InteractionRecord;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("duplicate document id {0:?}")]
    DuplicateDoc(String),
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub timestamp: Option<i64>,
}

impl Document {
    /// Indexes a history record as `query ⧺ response`.
    pub fn from_record(record: &InteractionRecord) -> Self {
        Self {
            id: record.record_id.clone(),
            text: format!("{} {}", record.query, record.response),
            timestamp: Some(record.timestamp),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    pub doc_count: usize,
    pub avg_doc_len: f64,
    /// term -> (doc index, term frequency), doc indexes ascending
    pub postings: BTreeMap<String, Vec<(usize, u32)>>,
    pub doc_lengths: Vec<u32>,
    pub doc_ids: Vec<String>,
    pub timestamps: Vec<Option<i64>>,
    pub params: Bm25Params,
}

pub fn build_index(docs: &[Document], params: Bm25Params) -> Result<InvertedIndex, RetrievalError> {
    if docs.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    let mut postings: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
    let mut doc_lengths = Vec::with_capacity(docs.len());
    for (idx, doc) in docs.iter().enumerate() {
        if !seen.insert(doc.id.as_str()) {
            return Err(RetrievalError::DuplicateDoc(doc.id.clone()));
        }
        let tokens = tokenize(&doc.text);
        doc_lengths.push(tokens.len() as u32);
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in tokens {
            *tf.entry(t).or_default() += 1;
        }
        for (term, count) in tf {
            postings.entry(term).or_default().push((idx, count));
        }
    }
    let total: u64 = doc_lengths.iter().map(|&l| u64::from(l)).sum();
    Ok(InvertedIndex {
        doc_count: docs.len(),
        avg_doc_len: total as f64 / docs.len() as f64,
        postings,
        doc_lengths,
        doc_ids: docs.iter().map(|d| d.id.clone()).collect(),
        timestamps: docs.iter().map(|d| d.timestamp).collect(),
        params,
    })
}

impl InvertedIndex {
    fn idf(&self, df: usize) -> f64 {
        let n = self.doc_count as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 scores for every document, in index order.
    pub fn scores(&self, query: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_count];
        let Bm25Params { k1, b } = self.params;
        for term in unique_terms(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(list.len());
            for &(doc, tf) in list {
                let tf = f64::from(tf);
                let len_norm = if self.avg_doc_len > 0.0 {
                    f64::from(self.doc_lengths[doc]) / self.avg_doc_len
                } else {
                    0.0
                };
                scores[doc] += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len_norm));
            }
        }
        scores
    }

    /// Highest-scoring `min(k, N)` documents. Ties go to the most recent
    /// document (timestamp, then doc id, both descending).
    pub fn top_k(&self, query: &str, k: usize) -> Vec<ScoredDoc> {
        let scores = self.scores(query);
        let mut order: Vec<usize> = (0..self.doc_count).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.timestamps[b].cmp(&self.timestamps[a]))
                .then_with(|| self.doc_ids[b].cmp(&self.doc_ids[a]))
        });
        order
            .into_iter()
            .take(k)
            .map(|i| ScoredDoc {
                doc_id: self.doc_ids[i].clone(),
                score: scores[i],
            })
            .collect()
    }
}

/// Query terms in first-occurrence order, deduplicated.
pub fn unique_terms(query: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    tokenize(query)
        .into_iter()
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(texts: &[&str]) -> Vec<Document> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document {
                id: format!("d{i}"),
                text: t.to_string(),
                timestamp: Some(i as i64),
            })
            .collect()
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("The Movie, 2024!"), ["the", "movie", "2024"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a--b"), ["a", "b"]);
    }

    #[test]
    fn index_structure() {
        let idx = build_index(&docs(&["a b c", "a b c d e"]), Bm25Params::default()).unwrap();
        assert_eq!(idx.avg_doc_len, 4.0);
        let idx = build_index(&docs(&["x x x"]), Bm25Params::default()).unwrap();
        assert_eq!(idx.postings["x"], [(0, 3)]);
        assert_eq!(
            build_index(&[], Bm25Params::default()),
            Err(RetrievalError::EmptyCorpus)
        );
    }

    #[test]
    fn duplicate_doc_rejected() {
        let mut d = docs(&["a", "b"]);
        d[1].id = "d0".into();
        assert!(matches!(
            build_index(&d, Bm25Params::default()),
            Err(RetrievalError::DuplicateDoc(_))
        ));
    }

    #[test]
    fn single_doc_always_returned() {
        let idx = build_index(&docs(&["hello world"]), Bm25Params::default()).unwrap();
        let top = idx.top_k("unrelated", 3);
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].doc_id, "d0");
    }

    #[test]
    fn oov_query_returns_most_recent() {
        let idx = build_index(&docs(&["a", "b", "c", "d"]), Bm25Params::default()).unwrap();
        let top = idx.top_k("zzz", 2);
        assert_eq!(
            top.iter().map(|d| d.doc_id.as_str()).collect::<Vec<_>>(),
            ["d3", "d2"]
        );
        assert!(top.iter().all(|d| d.score == 0.0));
    }

    #[test]
    fn matching_doc_ranks_first() {
        let idx = build_index(
            &docs(&["space opera", "romantic comedy", "space war"]),
            Bm25Params::default(),
        )
        .unwrap();
        let top = idx.top_k("romantic", 1);
        assert_eq!(top[0].doc_id, "d1");
        assert!(top[0].score > 0.0);
    }

    #[test]
    fn no_timestamps_falls_back_to_doc_id() {
        let d: Vec<Document> = ["a", "b"]
            .iter()
            .map(|id| Document {
                id: id.to_string(),
                text: "x".into(),
                timestamp: None,
            })
            .collect();
        let idx = build_index(&d, Bm25Params::default()).unwrap();
        assert_eq!(idx.top_k("x", 2)[0].doc_id, "b");
    }
}
