//! Textual user profiles and the numeric profile vector ρ_u.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{InteractionRecord, UserHistory};
use crate::embedding::{concat, mean, EmbeddingError, EmbeddingProvider, EmbeddingVector};
use crate::llm::{LlmClient, LlmError};
use crate::template::{slots, PromptKind, TemplateError, NONE_MARKER};

pub const DEFAULT_HISTORY_BUDGET: usize = 4000;
pub const DEFAULT_PROFILE_CAP: usize = 2000;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("user history is empty")]
    EmptyHistory,
    #[error("no records to update the profile with")]
    NoRecords,
    #[error("LLM returned an empty profile")]
    EmptyCompletion,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub user_id: String,
    pub profile_text: String,
    pub profile_vector: EmbeddingVector,
    pub source_phase: usize,
}

/// One line of `profiles.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub user_id: String,
    pub phase: usize,
    pub profile_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileLimits {
    /// Characters of rendered history allowed in one prompt.
    pub history_budget: usize,
    /// Characters kept from each profile completion.
    pub profile_cap: usize,
}

impl Default for ProfileLimits {
    fn default() -> Self {
        Self {
            history_budget: DEFAULT_HISTORY_BUDGET,
            profile_cap: DEFAULT_PROFILE_CAP,
        }
    }
}

/// ρ_u: mean over records of `concat(emb(query), emb(response))`.
pub fn build_profile_vector(
    history: &UserHistory,
    provider: &dyn EmbeddingProvider,
) -> Result<EmbeddingVector, ProfileError> {
    if history.is_empty() {
        return Err(ProfileError::EmptyHistory);
    }
    let rows = history
        .records
        .iter()
        .map(|r| {
            Ok(concat(
                &provider.embed(&r.query)?,
                &provider.embed(&r.response)?,
            ))
        })
        .collect::<Result<Vec<_>, EmbeddingError>>()?;
    Ok(mean(&rows)?)
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `Q: <query> | A: <response>`, whitespace collapsed to keep one line.
pub fn render_record(record: &InteractionRecord) -> String {
    format!(
        "Q: {} | A: {}",
        one_line(&record.query),
        one_line(&record.response)
    )
}

/// Renders records one per line, chronologically, dropping the oldest lines
/// until the text fits `budget` characters. A single line longer than the
/// budget is cut at the end.
pub fn render_history(records: &[InteractionRecord], budget: usize) -> String {
    let lines: Vec<String> = records.iter().map(render_record).collect();
    let mut kept = 0;
    let mut used = 0;
    for line in lines.iter().rev() {
        let cost = line.chars().count() + usize::from(kept > 0);
        if used + cost > budget {
            break;
        }
        used += cost;
        kept += 1;
    }
    if kept == 0 {
        return lines
            .last()
            .map(|l| l.chars().take(budget).collect())
            .unwrap_or_default();
    }
    lines[lines.len() - kept..].join("\n")
}

fn truncate_chars(text: &str, cap: usize) -> String {
    match text.char_indices().nth(cap) {
        Some((at, _)) => text[..at].to_string(),
        None => text.to_string(),
    }
}

fn finish(completion: String, cap: usize) -> Result<String, ProfileError> {
    let text = completion.trim();
    if text.is_empty() {
        return Err(ProfileError::EmptyCompletion);
    }
    Ok(truncate_chars(text, cap))
}

/// Profile written from scratch for a whole history.
pub fn summarize_profile(
    history: &UserHistory,
    llm: &LlmClient,
    limits: ProfileLimits,
) -> Result<String, ProfileError> {
    if history.is_empty() {
        return Err(ProfileError::EmptyHistory);
    }
    let rendered = render_history(&history.records, limits.history_budget);
    let prompt = llm
        .templates()
        .get(PromptKind::ProfileSummary)
        .render(&[(slots::HISTORY, &rendered)])?;
    finish(llm.complete(&prompt)?, limits.profile_cap)
}

/// Folds one phase's records into an existing profile.
pub fn update_profile(
    old_profile: &str,
    phase_records: &[InteractionRecord],
    llm: &LlmClient,
    limits: ProfileLimits,
) -> Result<String, ProfileError> {
    if phase_records.is_empty() {
        return Err(ProfileError::NoRecords);
    }
    let memory = if old_profile.trim().is_empty() {
        NONE_MARKER
    } else {
        old_profile
    };
    let rendered = render_history(phase_records, limits.history_budget);
    let prompt = llm.templates().get(PromptKind::ProfileUpdate).render(&[
        (slots::PERSONAL_MEMORY, memory),
        (slots::NEW_RECORDS, &rendered),
    ])?;
    finish(llm.complete(&prompt)?, limits.profile_cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashEmbedder;
    use crate::llm::{EchoMock, RuleMock};
    use crate::template::{TemplateRegistry, TemplateSet};
    use std::sync::Arc;

    fn rec(id: &str, ts: i64, q: &str, r: &str) -> InteractionRecord {
        InteractionRecord {
            user_id: "u".into(),
            record_id: id.into(),
            query: q.into(),
            response: r.into(),
            timestamp: ts,
            label: None,
        }
    }

    fn client(rule: bool, set: &str) -> LlmClient {
        let reg = TemplateRegistry::builtin();
        let backend: Arc<dyn crate::llm::LlmBackend> = if rule {
            Arc::new(RuleMock::new(reg))
        } else {
            Arc::new(EchoMock::new(reg))
        };
        LlmClient::new(backend, TemplateSet::builtin(set).unwrap())
    }

    #[test]
    fn single_record_vector_is_concat() {
        let p = HashEmbedder::new(16, 3).unwrap();
        let h = UserHistory::new("u", vec![rec("a", 1, "space opera", "scifi")]);
        let v = build_profile_vector(&h, &p).unwrap();
        let expected = concat(&p.embed("space opera").unwrap(), &p.embed("scifi").unwrap());
        assert_eq!(v.values(), expected.values());
        assert_eq!(v.dimension(), 32);
    }

    #[test]
    fn identical_records_give_single_record_vector() {
        let p = HashEmbedder::new(8, 1).unwrap();
        let one = UserHistory::new("u", vec![rec("a", 1, "q", "r")]);
        let many = UserHistory::new(
            "u",
            (0..5).map(|i| rec(&format!("r{i}"), i, "q", "r")).collect(),
        );
        let a = build_profile_vector(&one, &p).unwrap();
        let b = build_profile_vector(&many, &p).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_history_rejected() {
        let p = HashEmbedder::default();
        assert!(matches!(
            build_profile_vector(&UserHistory::new("u", vec![]), &p),
            Err(ProfileError::EmptyHistory)
        ));
    }

    #[test]
    fn history_budget_drops_oldest() {
        let records = vec![
            rec("a", 1, "one", "x"),
            rec("b", 2, "two", "y"),
            rec("c", 3, "three", "z"),
        ];
        let full = render_history(&records, 4000);
        assert_eq!(full, "Q: one | A: x\nQ: two | A: y\nQ: three | A: z");
        let last_two = "Q: two | A: y\nQ: three | A: z";
        assert_eq!(render_history(&records, last_two.len()), last_two);
        assert_eq!(render_history(&records, 5), "Q: th");
    }

    #[test]
    fn multiline_fields_stay_on_one_line() {
        assert_eq!(
            render_record(&rec("a", 1, "two\nlines", " padded ")),
            "Q: two lines | A: padded"
        );
    }

    #[test]
    fn echo_update_fills_none_marker() {
        let out = update_profile(
            "",
            &[rec("a", 1, "a heist film", "crime")],
            &client(false, "movie_tagging"),
            ProfileLimits::default(),
        )
        .unwrap();
        assert!(out.contains(NONE_MARKER));
        assert!(out.contains("Q: a heist film | A: crime"));
    }

    #[test]
    fn echo_summary_contains_history() {
        let h = UserHistory::new("u", vec![rec("a", 1, "q1", "r1"), rec("b", 2, "q2", "r2")]);
        let out =
            summarize_profile(&h, &client(false, "generic"), ProfileLimits::default()).unwrap();
        assert!(out.contains(&render_history(&h.records, 4000)));
    }

    #[test]
    fn rule_summary_lists_each_tag_once() {
        let h = UserHistory::new(
            "u",
            vec![
                rec("a", 1, "m1", "comedy"),
                rec("b", 2, "m2", "drama"),
                rec("c", 3, "m3", "comedy"),
            ],
        );
        let out = summarize_profile(&h, &client(true, "movie_tagging"), ProfileLimits::default())
            .unwrap();
        assert_eq!(out, "- comedy\n- drama");
    }

    #[test]
    fn rule_update_adds_new_tag() {
        let out = update_profile(
            "- a",
            &[rec("x", 1, "m", "b")],
            &client(true, "movie_tagging"),
            ProfileLimits::default(),
        )
        .unwrap();
        let tags: std::collections::BTreeSet<&str> = out.lines().collect();
        assert_eq!(tags, ["- a", "- b"].into_iter().collect());
    }

    #[test]
    fn profile_cap_truncates_tail() {
        let limits = ProfileLimits {
            history_budget: 4000,
            profile_cap: 4,
        };
        let out = update_profile(
            "",
            &[rec("a", 1, "q", "r")],
            &client(false, "generic"),
            limits,
        )
        .unwrap();
        assert_eq!(out, "(non");
    }
}
