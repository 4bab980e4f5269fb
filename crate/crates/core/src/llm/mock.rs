//! Deterministic backends that interpret prompts rendered from the
//! repository's templates.
//!
//! The rule mock is a test oracle with a fixed, documented behavior:
//!
//! * profile summary/update: frequency-ordered, deduplicated bullet list of
//!   the items in the old memory plus the answers of the new records;
//! * global update: the same union over the prior global memory and every
//!   personalized memory, each item annotated with its cumulative support
//!   as `- item (n)` and truncated to the requested item count;
//! * mediator (classification): weighted vote over label occurrences, local
//!   section ×[`LOCAL_WEIGHT`], global section ×[`GLOBAL_WEIGHT`], ties
//!   broken lexicographically;
//! * mediator (regression): weighted mean of the numbers in both sections;
//! * mediator (generation): the ten most frequent content terms.
//!
//! Within a section each line carrying evidence gets weight
//! `mult · M / Σmult`, where `mult` is the line's `(n)` annotation (1 when
//! absent) and `M` the number of such lines. Unannotated sections therefore
//! count plain occurrences, while an annotated global memory spreads the
//! same total mass according to support.

use std::collections::{BTreeMap, BTreeSet};

use once_cell_regex::number_regex;

use super::{LlmBackend, LlmError, LlmRequest};
use crate::retrieval::tokenize;
use crate::template::{
    slots, PromptKind, SlotValues, Template, TemplateRegistry, INSTRUCTION_SEPARATOR, NONE_MARKER,
};

pub const LOCAL_WEIGHT: f64 = 2.0;
pub const GLOBAL_WEIGHT: f64 = 1.0;

const GENERATION_TERMS: usize = 10;
const DEFAULT_MAX_ITEMS: usize = 20;
const TIE_EPS: f64 = 1e-9;

const STOPWORDS: &[&str] = &[
    "about", "and", "are", "but", "for", "from", "has", "have", "her", "his", "its", "none", "not",
    "now", "our", "that", "the", "their", "them", "then", "there", "these", "they", "this", "was",
    "were", "what", "when", "which", "who", "will", "with", "you", "your",
];

mod once_cell_regex {
    use regex::Regex;
    use std::sync::OnceLock;

    pub fn number_regex() -> &'static Regex {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| Regex::new(r"-?\d+(?:\.\d+)?").expect("valid regex"))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Task {
    Classification(Vec<String>),
    Regression,
    Generation,
}

#[derive(Debug)]
enum Parsed {
    Summary {
        history: String,
    },
    Update {
        memory: String,
        records: String,
    },
    Global {
        prior: String,
        memories: String,
        max_items: usize,
    },
    Mediator {
        local: String,
        global: String,
        task: Task,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Plain(PromptKind),
    Mediator(Option<PromptKind>),
}

/// Every prompt shape the registry can render, in match order.
#[derive(Debug, Clone)]
struct Recognizer {
    shapes: Vec<(Shape, Template)>,
}

impl Recognizer {
    fn new(registry: &TemplateRegistry) -> Self {
        let mut shapes = Vec::new();
        for set in registry.sets() {
            for kind in [
                PromptKind::ProfileSummary,
                PromptKind::ProfileUpdate,
                PromptKind::GlobalUpdate,
            ] {
                shapes.push((Shape::Plain(kind), set.get(kind).clone()));
            }
            let mediator = set.get(PromptKind::Mediator);
            for kind in [
                PromptKind::InstructClassification,
                PromptKind::InstructRegression,
                PromptKind::InstructGeneration,
            ] {
                let composed = mediator.followed_by(INSTRUCTION_SEPARATOR, set.get(kind));
                shapes.push((Shape::Mediator(Some(kind)), composed));
            }
            shapes.push((Shape::Mediator(None), mediator.clone()));
        }
        Self { shapes }
    }

    fn recognize(&self, prompt: &str) -> Option<(Shape, SlotValues)> {
        self.shapes
            .iter()
            .find_map(|(shape, t)| t.match_prompt(prompt).map(|v| (*shape, v)))
    }
}

fn parse(shape: Shape, v: &SlotValues) -> Option<Parsed> {
    let get = |s: &str| v.get(s).unwrap_or_default().to_string();
    Some(match shape {
        Shape::Plain(PromptKind::ProfileSummary) => Parsed::Summary {
            history: get(slots::HISTORY),
        },
        Shape::Plain(PromptKind::ProfileUpdate) => Parsed::Update {
            memory: get(slots::PERSONAL_MEMORY),
            records: get(slots::NEW_RECORDS),
        },
        Shape::Plain(PromptKind::GlobalUpdate) => Parsed::Global {
            prior: get(slots::GLOBAL_MEMORY_PRIOR),
            memories: get(slots::PERSONAL_MEMORIES),
            max_items: get(slots::MAX_ITEMS)
                .trim()
                .parse()
                .unwrap_or(DEFAULT_MAX_ITEMS),
        },
        Shape::Mediator(Some(kind)) => Parsed::Mediator {
            local: get(slots::LOCAL_MEMORY),
            global: get(slots::GLOBAL_MEMORY),
            task: match kind {
                PromptKind::InstructClassification => Task::Classification(
                    get(slots::LABELS)
                        .split(',')
                        .map(|l| l.trim().to_string())
                        .filter(|l| !l.is_empty())
                        .collect(),
                ),
                PromptKind::InstructRegression => Task::Regression,
                _ => Task::Generation,
            },
        },
        _ => return None,
    })
}

/// Returns the prompt's slot contents concatenated in template order, or
/// the prompt itself when it matches no known template.
pub struct EchoMock {
    recognizer: Recognizer,
}

impl EchoMock {
    pub fn new(registry: TemplateRegistry) -> Self {
        Self {
            recognizer: Recognizer::new(&registry),
        }
    }
}

impl LlmBackend for EchoMock {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        Ok(match self.recognizer.recognize(&request.prompt) {
            Some((_, values)) => values.values().collect::<Vec<_>>().join("\n"),
            None => request.prompt.clone(),
        })
    }
}

pub struct RuleMock {
    recognizer: Recognizer,
}

impl RuleMock {
    pub fn new(registry: TemplateRegistry) -> Self {
        Self {
            recognizer: Recognizer::new(&registry),
        }
    }

    /// The oracle's answer for a prompt.
    pub fn respond(&self, prompt: &str) -> Result<String, LlmError> {
        let parsed = self
            .recognizer
            .recognize(prompt)
            .and_then(|(shape, v)| parse(shape, &v))
            .ok_or_else(|| LlmError::Unrecognized(prompt.chars().take(80).collect()))?;
        Ok(match parsed {
            Parsed::Summary { history } => profile_union("", &history),
            Parsed::Update { memory, records } => profile_union(&memory, &records),
            Parsed::Global {
                prior,
                memories,
                max_items,
            } => global_union(&prior, &memories, max_items),
            Parsed::Mediator {
                local,
                global,
                task,
            } => match task {
                Task::Classification(labels) => classify(&local, &global, &labels),
                Task::Regression => regress(&local, &global),
                Task::Generation => generate(&local, &global),
            },
        })
    }
}

impl LlmBackend for RuleMock {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        self.respond(&request.prompt)
    }
}

/// Splits a trailing ` (n)` support annotation off an item.
fn strip_annotation(item: &str) -> (&str, u64) {
    let item = item.trim();
    if let Some(open) = item.rfind(" (") {
        if let Some(num) = item[open + 2..].strip_suffix(')') {
            if let Ok(n) = num.parse::<u64>() {
                return (item[..open].trim_end(), n);
            }
        }
    }
    (item, 1)
}

fn bullet(line: &str) -> Option<&str> {
    let l = line.trim_start();
    l.strip_prefix("- ").or_else(|| l.strip_prefix("* "))
}

fn content_terms(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| {
            t.chars().count() >= 3
                && !t.chars().all(|c| c.is_ascii_digit())
                && !STOPWORDS.contains(&t.as_str())
        })
        .collect()
}

/// Items carried by a record's answer: the answer itself when it is a
/// short tag, else its content terms.
fn answer_items(answer: &str) -> Vec<String> {
    let answer = answer.trim();
    if answer.is_empty() {
        Vec::new()
    } else if tokenize(answer).len() <= 3 {
        vec![answer.to_string()]
    } else {
        content_terms(answer)
    }
}

fn record_answer(line: &str) -> Option<&str> {
    line.split_once(" | A: ").map(|(_, a)| a)
}

fn render_bullets(counts: BTreeMap<String, u64>, limit: usize, annotate: bool) -> String {
    let mut items: Vec<(String, u64)> = counts.into_iter().filter(|(_, n)| *n > 0).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items.truncate(limit);
    if items.is_empty() {
        return NONE_MARKER.to_string();
    }
    items
        .into_iter()
        .map(|(item, n)| {
            if annotate {
                format!("- {item} ({n})")
            } else {
                format!("- {item}")
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn profile_union(memory: &str, records: &str) -> String {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for line in memory.lines() {
        if let Some(b) = bullet(line) {
            let (item, n) = strip_annotation(b);
            *counts.entry(item.to_string()).or_default() += n;
        }
    }
    for line in records.lines() {
        if let Some(answer) = record_answer(line) {
            for item in answer_items(answer) {
                *counts.entry(item).or_default() += 1;
            }
        }
    }
    render_bullets(counts, usize::MAX, false)
}

fn global_union(prior: &str, memories: &str, max_items: usize) -> String {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for line in prior.lines() {
        if let Some(b) = bullet(line) {
            let (item, n) = strip_annotation(b);
            *counts.entry(item.to_string()).or_default() += n;
        }
    }
    // a non-bullet line (e.g. "User u1:") opens the next personalized memory
    let mut block: BTreeSet<String> = BTreeSet::new();
    let flush = |block: &mut BTreeSet<String>, counts: &mut BTreeMap<String, u64>| {
        for item in std::mem::take(block) {
            *counts.entry(item).or_default() += 1;
        }
    };
    for line in memories.lines() {
        match bullet(line) {
            Some(b) => {
                block.insert(strip_annotation(b).0.to_string());
            }
            None => flush(&mut block, &mut counts),
        }
    }
    flush(&mut block, &mut counts);
    render_bullets(counts, max_items, true)
}

/// Evidence-bearing text and multiplicity of each line in a memory section.
fn section_lines(section: &str) -> Vec<(&str, u64)> {
    section
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let body = bullet(l).unwrap_or(l);
            let (body, mult) = strip_annotation(body);
            (record_answer(body).unwrap_or(body), mult)
        })
        .collect()
}

fn count_sequence(haystack: &[String], needle: &[String]) -> usize {
    if needle.is_empty() || needle.len() > haystack.len() {
        return 0;
    }
    haystack
        .windows(needle.len())
        .filter(|w| *w == needle)
        .count()
}

/// Applies the per-line weighting to lines that carry evidence.
fn weighted_lines<T>(section: &str, evidence: impl Fn(&str) -> Option<T>) -> Vec<(f64, T)> {
    let kept: Vec<(u64, T)> = section_lines(section)
        .into_iter()
        .filter_map(|(body, mult)| evidence(body).map(|e| (mult, e)))
        .collect();
    let total: u64 = kept.iter().map(|(m, _)| *m).sum();
    let lines = kept.len() as f64;
    kept.into_iter()
        .map(|(m, e)| (m as f64 * lines / total as f64, e))
        .collect()
}

fn label_votes(section: &str, labels: &[String], weight: f64, votes: &mut BTreeMap<String, f64>) {
    let label_tokens: Vec<Vec<String>> = labels.iter().map(|l| tokenize(l)).collect();
    let lines = weighted_lines(section, |body| {
        let tokens = tokenize(body);
        let counts: Vec<usize> = label_tokens
            .iter()
            .map(|lt| count_sequence(&tokens, lt))
            .collect();
        counts.iter().any(|c| *c > 0).then_some(counts)
    });
    for (w, counts) in lines {
        for (label, c) in labels.iter().zip(counts) {
            if c > 0 {
                *votes.entry(label.clone()).or_default() += weight * w * c as f64;
            }
        }
    }
}

fn classify(local: &str, global: &str, labels: &[String]) -> String {
    let mut votes = BTreeMap::new();
    label_votes(local, labels, LOCAL_WEIGHT, &mut votes);
    label_votes(global, labels, GLOBAL_WEIGHT, &mut votes);
    let best = votes.values().cloned().fold(0.0, f64::max);
    if best <= 0.0 {
        return NONE_MARKER.to_string();
    }
    // BTreeMap iterates labels in lexicographic order, so the first hit wins ties
    votes
        .into_iter()
        .find(|(_, v)| *v >= best - TIE_EPS)
        .map(|(l, _)| l)
        .unwrap_or_else(|| NONE_MARKER.to_string())
}

fn regress(local: &str, global: &str) -> String {
    let mut num = 0.0;
    let mut den = 0.0;
    for (section, weight) in [(local, LOCAL_WEIGHT), (global, GLOBAL_WEIGHT)] {
        let lines = weighted_lines(section, |body| {
            let values: Vec<f64> = number_regex()
                .find_iter(body)
                .filter_map(|m| m.as_str().parse().ok())
                .collect();
            (!values.is_empty()).then_some(values)
        });
        for (w, values) in lines {
            for v in values {
                num += weight * w * v;
                den += weight * w;
            }
        }
    }
    if den == 0.0 {
        return NONE_MARKER.to_string();
    }
    let mean = num / den;
    if (mean - mean.round()).abs() < 1e-9 {
        format!("{}", mean.round() as i64)
    } else {
        format!("{mean:.2}")
    }
}

fn generate(local: &str, global: &str) -> String {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for section in [local, global] {
        for (body, _) in section_lines(section) {
            for term in content_terms(body) {
                *counts.entry(term).or_default() += 1;
            }
        }
    }
    let mut terms: Vec<(String, usize)> = counts.into_iter().collect();
    terms.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if terms.is_empty() {
        return NONE_MARKER.to_string();
    }
    terms
        .into_iter()
        .take(GENERATION_TERMS)
        .map(|(t, _)| t)
        .collect::<Vec<_>>()
        .join(" ")
}
