//! Prompt templates with `{slot name}` placeholders.
//!
//! A template is parsed once into literal and slot segments. Rendering fills
//! every slot in a single pass, so braces inside filled content are never
//! re-interpreted. The same segment list drives [`Template::match_prompt`],
//! which recovers slot contents from a rendered prompt; the mock backends
//! rely on it.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template {template}: unknown placeholder {{{slot}}}")]
    UnknownPlaceholder { template: String, slot: String },
    #[error("template {template}: required placeholder {{{slot}}} is missing")]
    MissingPlaceholder { template: String, slot: String },
    #[error(
        "template {template}: adjacent placeholders {{{first}}}{{{second}}} cannot be separated"
    )]
    AdjacentSlots {
        template: String,
        first: String,
        second: String,
    },
    #[error("unknown template set {0:?}")]
    UnknownSet(String),
    #[error("reading template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    segments: Vec<Segment>,
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty()
        && s.starts_with(|c: char| c.is_ascii_lowercase())
        && s.chars()
            .all(|c| c.is_ascii_lowercase() || c == ' ' || c == '_')
}

impl Template {
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self, TemplateError> {
        let name = name.into();
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut rest = text;
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_slot_name(&after[..close]) => {
                    literal.push_str(&rest[..open]);
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    let slot = after[..close].to_string();
                    if let Some(Segment::Slot(prev)) = segments.last() {
                        return Err(TemplateError::AdjacentSlots {
                            template: name,
                            first: prev.clone(),
                            second: slot,
                        });
                    }
                    segments.push(Segment::Slot(slot));
                    rest = &after[close + 1..];
                }
                _ => {
                    literal.push_str(&rest[..=open]);
                    rest = after;
                }
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }
        Ok(Self { name, segments })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(n) => Some(n.as_str()),
            Segment::Literal(_) => None,
        })
    }

    /// Placeholder token as it appears in template text, e.g. `{query}`.
    pub fn placeholder_tokens(&self) -> Vec<String> {
        self.slots().map(|s| format!("{{{s}}}")).collect()
    }

    fn require(&self, required: &[&str]) -> Result<(), TemplateError> {
        for slot in required {
            if !self.slots().any(|s| s == *slot) {
                return Err(TemplateError::MissingPlaceholder {
                    template: self.name.clone(),
                    slot: slot.to_string(),
                });
            }
        }
        for slot in self.slots() {
            if !required.contains(&slot) {
                return Err(TemplateError::UnknownPlaceholder {
                    template: self.name.clone(),
                    slot: slot.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(l) => out.push_str(l),
                Segment::Slot(s) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| k == s)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| TemplateError::UnknownPlaceholder {
                            template: self.name.clone(),
                            slot: s.clone(),
                        })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }

    /// Appends another template's segments, joined by `separator`.
    pub fn followed_by(&self, separator: &str, other: &Template) -> Template {
        let mut segments = self.segments.clone();
        let mut tail = other.segments.clone();
        let mut joint = separator.to_string();
        if let Some(Segment::Literal(l)) = segments.last() {
            joint = format!("{l}{joint}");
            segments.pop();
        }
        if let Some(Segment::Literal(l)) = tail.first() {
            joint.push_str(l);
            tail.remove(0);
        }
        if !joint.is_empty() {
            segments.push(Segment::Literal(joint));
        }
        segments.extend(tail);
        Template {
            name: format!("{}+{}", self.name, other.name),
            segments,
        }
    }

    /// Recovers slot contents from a prompt rendered by this template.
    ///
    /// Slot content runs up to the first occurrence of the following literal;
    /// the final literal must be a suffix of the prompt.
    pub fn match_prompt(&self, prompt: &str) -> Option<SlotValues> {
        let mut out = SlotValues::default();
        let mut rest = prompt;
        let mut pending: Option<&str> = None;
        let last = self.segments.len().saturating_sub(1);
        for (i, seg) in self.segments.iter().enumerate() {
            match seg {
                Segment::Slot(s) => pending = Some(s),
                Segment::Literal(l) => match pending.take() {
                    None => rest = rest.strip_prefix(l.as_str())?,
                    Some(slot) if i == last => {
                        let content = rest.strip_suffix(l.as_str())?;
                        out.0.push((slot.to_string(), content.to_string()));
                        rest = "";
                    }
                    Some(slot) => {
                        let at = rest.find(l.as_str())?;
                        out.0.push((slot.to_string(), rest[..at].to_string()));
                        rest = &rest[at + l.len()..];
                    }
                },
            }
        }
        if let Some(slot) = pending {
            out.0.push((slot.to_string(), rest.to_string()));
        } else if !rest.is_empty() {
            return None;
        }
        Some(out)
    }
}

/// Slot contents recovered from a prompt, in template order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotValues(pub Vec<(String, String)>);

impl SlotValues {
    pub fn get(&self, slot: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(k, _)| k == slot)
            .map(|(_, v)| v.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|(_, v)| v.as_str())
    }
}

impl std::ops::Index<&str> for SlotValues {
    type Output = str;

    fn index(&self, slot: &str) -> &str {
        self.get(slot).expect("slot present")
    }
}

pub mod slots {
    pub const HISTORY: &str = "history";
    pub const PERSONAL_MEMORY: &str = "updated personalized memory";
    pub const NEW_RECORDS: &str = "new records";
    pub const GLOBAL_MEMORY_PRIOR: &str = "updated global memory";
    pub const PERSONAL_MEMORIES: &str = "personalized memories";
    pub const MAX_ITEMS: &str = "max items";
    pub const LOCAL_MEMORY: &str = "local memory";
    pub const GLOBAL_MEMORY: &str = "global memory";
    pub const QUERY: &str = "query";
    pub const LABELS: &str = "labels";
    pub const MIN: &str = "min";
    pub const MAX: &str = "max";
}

/// Rendered in place of an absent memory.
pub const NONE_MARKER: &str = "(none)";

/// Separator between the mediator body and the task instruction block.
pub const INSTRUCTION_SEPARATOR: &str = "\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptKind {
    ProfileSummary,
    ProfileUpdate,
    GlobalUpdate,
    Mediator,
    InstructClassification,
    InstructRegression,
    InstructGeneration,
}

impl PromptKind {
    pub const ALL: [PromptKind; 7] = [
        PromptKind::ProfileSummary,
        PromptKind::ProfileUpdate,
        PromptKind::GlobalUpdate,
        PromptKind::Mediator,
        PromptKind::InstructClassification,
        PromptKind::InstructRegression,
        PromptKind::InstructGeneration,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            PromptKind::ProfileSummary => "profile_summary.txt",
            PromptKind::ProfileUpdate => "profile_update.txt",
            PromptKind::GlobalUpdate => "global_update.txt",
            PromptKind::Mediator => "mediator.txt",
            PromptKind::InstructClassification => "instruct_classification.txt",
            PromptKind::InstructRegression => "instruct_regression.txt",
            PromptKind::InstructGeneration => "instruct_generation.txt",
        }
    }

    pub fn required_slots(self) -> &'static [&'static str] {
        use slots::*;
        match self {
            PromptKind::ProfileSummary => &[HISTORY],
            PromptKind::ProfileUpdate => &[PERSONAL_MEMORY, NEW_RECORDS],
            PromptKind::GlobalUpdate => &[GLOBAL_MEMORY_PRIOR, PERSONAL_MEMORIES, MAX_ITEMS],
            PromptKind::Mediator => &[LOCAL_MEMORY, GLOBAL_MEMORY, QUERY],
            PromptKind::InstructClassification => &[LABELS],
            PromptKind::InstructRegression => &[MIN, MAX],
            PromptKind::InstructGeneration => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub id: String,
    templates: BTreeMap<PromptKind, Template>,
}

const BUILTIN: &[(&str, [&str; 7])] = &[
    (
        "movie_tagging",
        [
            include_str!("../templates/movie_tagging/profile_summary.txt"),
            include_str!("../templates/movie_tagging/profile_update.txt"),
            include_str!("../templates/movie_tagging/global_update.txt"),
            include_str!("../templates/movie_tagging/mediator.txt"),
            include_str!("../templates/movie_tagging/instruct_classification.txt"),
            include_str!("../templates/movie_tagging/instruct_regression.txt"),
            include_str!("../templates/movie_tagging/instruct_generation.txt"),
        ],
    ),
    (
        "generic",
        [
            include_str!("../templates/generic/profile_summary.txt"),
            include_str!("../templates/generic/profile_update.txt"),
            include_str!("../templates/generic/global_update.txt"),
            include_str!("../templates/generic/mediator.txt"),
            include_str!("../templates/generic/instruct_classification.txt"),
            include_str!("../templates/generic/instruct_regression.txt"),
            include_str!("../templates/generic/instruct_generation.txt"),
        ],
    ),
];

// Template files end with a newline for editor friendliness; prompts do not.
fn clean(text: &str) -> &str {
    text.strip_suffix('\n').unwrap_or(text)
}

impl TemplateSet {
    pub fn from_texts(
        id: impl Into<String>,
        texts: impl IntoIterator<Item = (PromptKind, String)>,
    ) -> Result<Self, TemplateError> {
        let id = id.into();
        let mut templates = BTreeMap::new();
        for (kind, text) in texts {
            let t = Template::parse(format!("{id}/{}", kind.file_name()), clean(&text))?;
            t.require(kind.required_slots())?;
            templates.insert(kind, t);
        }
        for kind in PromptKind::ALL {
            if !templates.contains_key(&kind) {
                return Err(TemplateError::Io {
                    path: format!("{id}/{}", kind.file_name()),
                    message: "template missing from set".into(),
                });
            }
        }
        Ok(Self { id, templates })
    }

    pub fn builtin(id: &str) -> Result<Self, TemplateError> {
        let (name, texts) = BUILTIN
            .iter()
            .find(|(name, _)| *name == id)
            .ok_or_else(|| TemplateError::UnknownSet(id.to_string()))?;
        Self::from_texts(
            *name,
            PromptKind::ALL
                .into_iter()
                .zip(texts.iter().map(|t| t.to_string())),
        )
    }

    pub fn builtin_ids() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(name, _)| *name)
    }

    /// Loads `<dir>/<kind>.txt` for every prompt kind.
    pub fn load_dir(id: impl Into<String>, dir: &Path) -> Result<Self, TemplateError> {
        let mut texts = Vec::new();
        for kind in PromptKind::ALL {
            let path = dir.join(kind.file_name());
            let text = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            texts.push((kind, text));
        }
        Self::from_texts(id, texts)
    }

    pub fn get(&self, kind: PromptKind) -> &Template {
        &self.templates[&kind]
    }

    /// Every placeholder token used by any template in this set.
    pub fn placeholder_tokens(&self) -> Vec<String> {
        let mut tokens: Vec<String> = self
            .templates
            .values()
            .flat_map(Template::placeholder_tokens)
            .collect();
        tokens.sort();
        tokens.dedup();
        tokens
    }
}

/// All template sets a mock backend may be asked to interpret.
#[derive(Debug, Clone, Default)]
pub struct TemplateRegistry {
    sets: Vec<TemplateSet>,
}

impl TemplateRegistry {
    pub fn builtin() -> Self {
        Self {
            sets: TemplateSet::builtin_ids()
                .map(|id| TemplateSet::builtin(id).expect("builtin templates are valid"))
                .collect(),
        }
    }

    pub fn with(mut self, set: TemplateSet) -> Self {
        self.sets.retain(|s| s.id != set.id);
        self.sets.push(set);
        self
    }

    pub fn get(&self, id: &str) -> Result<&TemplateSet, TemplateError> {
        self.sets
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| TemplateError::UnknownSet(id.to_string()))
    }

    pub fn sets(&self) -> &[TemplateSet] {
        &self.sets
    }
}
