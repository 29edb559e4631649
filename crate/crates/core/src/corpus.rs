//! Task specifications, demonstration pools and test sets.
//!
//! Pools are line-delimited JSON, one record per line:
//!
//! * single-text classification: `{"id", "text", "label"}`
//! * sentence-pair inference: `{"id", "sentence1", "sentence2", "label"}`
//! * entity extraction: `{"id", "text", "label": [[span, type], ...]}`

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{self, Deserializer};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("duplicate demo id {id:?} at line {line}")]
    DuplicateDemoId { line: usize, id: String },
    #[error("label {label} at line {line} is outside the task's label set")]
    LabelOutsideLabelSet { line: usize, label: String },
    #[error("invalid task spec: {0}")]
    InvalidTaskSpec(String),
}

impl From<JsonlError> for CorpusError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Io { path, source } => CorpusError::Io {
                path,
                message: source.to_string(),
            },
            JsonlError::Malformed { line, message } => {
                CorpusError::MalformedRecord { line, message }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleTextClassification,
    SentencePairInference,
    EntityExtraction,
}

impl TaskKind {
    pub fn is_classification(self) -> bool {
        !matches!(self, TaskKind::EntityExtraction)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::SingleTextClassification => "single_text_classification",
            TaskKind::SentencePairInference => "sentence_pair_inference",
            TaskKind::EntityExtraction => "entity_extraction",
        }
    }
}

/// What a task asks for and which labels are legal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub label_set: Vec<String>,
    #[serde(default)]
    pub entity_type_set: Vec<String>,
    pub task_description: String,
    pub default_demo_count: usize,
}

impl TaskSpec {
    /// Checks the invariants and lowercases the label set.
    pub fn validated(mut self) -> Result<Self, CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidTaskSpec(m));
        if self.default_demo_count < 1 {
            return bad("default_demo_count must be at least 1".into());
        }
        if self.kind.is_classification() {
            if self.label_set.is_empty() {
                return bad("classification tasks need a nonempty label_set".into());
            }
            if !self.entity_type_set.is_empty() {
                return bad("classification tasks carry no entity_type_set".into());
            }
        } else if self.entity_type_set.is_empty() {
            return bad("entity extraction needs a nonempty entity_type_set".into());
        }
        let mut seen = HashSet::new();
        for l in &mut self.label_set {
            *l = l.trim().to_lowercase();
            if l.is_empty() {
                return bad("empty label in label_set".into());
            }
            if !seen.insert(l.clone()) {
                return bad(format!("label {l:?} repeated (case-insensitive)"));
            }
        }
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let spec: TaskSpec = serde_json::from_str(&text)
            .map_err(|e| CorpusError::InvalidTaskSpec(format!("{}: {e}", path.display())))?;
        spec.validated()
    }

    /// Canonical spelling of an entity type, matched case-insensitively.
    pub fn canonical_entity_type(&self, ty: &str) -> Option<&str> {
        self.entity_type_set
            .iter()
            .find(|t| t.eq_ignore_ascii_case(ty.trim()))
            .map(String::as_str)
    }
}

/// One `(span, type)` mention.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entity {
    pub span: String,
    pub entity_type: String,
}

impl Entity {
    pub fn new(span: impl Into<String>, entity_type: impl Into<String>) -> Self {
        Self {
            span: span.into(),
            entity_type: entity_type.into(),
        }
    }
}

/// Gold or predicted label.
///
/// On the wire a class is a JSON string, an entity list is `[[span, type], ...]`
/// and `Invalid` is `null`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Label {
    ClassName(String),
    Entities(Vec<Entity>),
    Invalid,
}

impl Label {
    pub fn class(name: impl Into<String>) -> Self {
        Label::ClassName(name.into())
    }

    pub fn entities<S: Into<String>, T: Into<String>>(pairs: impl IntoIterator<Item = (S, T)>) -> Self {
        Label::Entities(pairs.into_iter().map(|(s, t)| Entity::new(s, t)).collect())
    }

    pub fn is_invalid(&self) -> bool {
        matches!(self, Label::Invalid)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::ClassName(c) => write!(f, "{c:?}"),
            Label::Entities(es) => {
                let pairs: Vec<String> = es
                    .iter()
                    .map(|e| format!("({:?}, {:?})", e.span, e.entity_type))
                    .collect();
                write!(f, "[{}]", pairs.join(", "))
            }
            Label::Invalid => f.write_str("<invalid>"),
        }
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Label::ClassName(c) => s.serialize_str(c),
            Label::Entities(es) => {
                let mut seq = s.serialize_seq(Some(es.len()))?;
                for e in es {
                    seq.serialize_element(&[&e.span, &e.entity_type])?;
                }
                seq.end()
            }
            Label::Invalid => s.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Wire {
            Class(String),
            Pairs(Vec<Vec<String>>),
            Null(()),
        }
        match Wire::deserialize(d)? {
            Wire::Class(c) => Ok(Label::ClassName(c)),
            Wire::Null(()) => Ok(Label::Invalid),
            Wire::Pairs(pairs) => pairs
                .into_iter()
                .map(|p| match <[String; 2]>::try_from(p) {
                    Ok([span, ty]) => Ok(Entity::new(span, ty)),
                    Err(p) => Err(de::Error::custom(format!(
                        "entity pair must have 2 elements, got {}",
                        p.len()
                    ))),
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Label::Entities),
        }
    }
}

/// A labeled example usable as a demonstration or as a test item.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub demo_id: String,
    pub primary_text: String,
    pub secondary_text: Option<String>,
    pub gold: Label,
}

/// The model-visible part of an example, without its label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextInput<'a> {
    pub primary: &'a str,
    pub secondary: Option<&'a str>,
}

impl Demonstration {
    pub fn input(&self) -> TextInput<'_> {
        TextInput {
            primary: &self.primary_text,
            secondary: self.secondary_text.as_deref(),
        }
    }

    /// Text embedded for retrieval: the sentence, or both sentences joined by `\n`.
    pub fn query_text(&self) -> String {
        match &self.secondary_text {
            Some(s) => format!("{}\n{}", self.primary_text, s),
            None => self.primary_text.clone(),
        }
    }
}

/// True iff `label` is a legal gold label for `spec`. Never mutates.
pub fn validate_gold(label: &Label, spec: &TaskSpec) -> bool {
    match label {
        Label::ClassName(c) => {
            spec.kind.is_classification()
                && spec.label_set.iter().any(|l| l.eq_ignore_ascii_case(c.trim()))
        }
        Label::Entities(es) => {
            spec.kind == TaskKind::EntityExtraction
                && es.iter().all(|e| spec.entity_type_set.contains(&e.entity_type))
        }
        Label::Invalid => false,
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    text: Option<String>,
    sentence1: Option<String>,
    sentence2: Option<String>,
    label: Label,
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.filter(|s| !s.is_empty())
}

fn demo_from_record(raw: RawRecord, line: usize, spec: &TaskSpec) -> Result<Demonstration, CorpusError> {
    let malformed = |m: &str| CorpusError::MalformedRecord {
        line,
        message: m.to_string(),
    };
    if raw.id.is_empty() {
        return Err(malformed("empty id"));
    }
    let (primary, secondary) = match spec.kind {
        TaskKind::SentencePairInference => {
            let s1 = non_empty(raw.sentence1).ok_or_else(|| malformed("missing sentence1"))?;
            let s2 = non_empty(raw.sentence2).ok_or_else(|| malformed("missing sentence2"))?;
            (s1, Some(s2))
        }
        _ => {
            if non_empty(raw.sentence2).is_some() {
                return Err(malformed("sentence2 given for a single-text task"));
            }
            let text = non_empty(raw.text)
                .or_else(|| non_empty(raw.sentence1))
                .ok_or_else(|| malformed("missing text"))?;
            (text, None)
        }
    };
    let gold = match (spec.kind, raw.label) {
        (k, Label::ClassName(c)) if k.is_classification() => Label::ClassName(c.trim().to_lowercase()),
        (TaskKind::EntityExtraction, l @ Label::Entities(_)) => l,
        (_, Label::Invalid) => return Err(malformed("null label")),
        (_, other) => {
            return Err(malformed(&format!(
                "label {other} does not fit task kind {}",
                spec.kind.as_str()
            )))
        }
    };
    if !validate_gold(&gold, spec) {
        return Err(CorpusError::LabelOutsideLabelSet {
            line,
            label: gold.to_string(),
        });
    }
    Ok(Demonstration {
        demo_id: raw.id,
        primary_text: primary,
        secondary_text: secondary,
        gold,
    })
}

/// Parses pool bytes already in memory; see [`load_pool`].
pub fn parse_pool(bytes: &str, spec: &TaskSpec) -> Result<Vec<Demonstration>, CorpusError> {
    let records: Vec<(usize, RawRecord)> =
        jsonl::parse_lines(bytes.as_bytes(), Path::new("<memory>"))?;
    build_pool(records, spec)
}

/// Loads every record of a pool or test file, validated against `spec`, in file order.
pub fn load_pool(path: &Path, spec: &TaskSpec) -> Result<Vec<Demonstration>, CorpusError> {
    let records: Vec<(usize, RawRecord)> = jsonl::read_records(path)?;
    build_pool(records, spec)
}

fn build_pool(records: Vec<(usize, RawRecord)>, spec: &TaskSpec) -> Result<Vec<Demonstration>, CorpusError> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, raw) in records {
        let demo = demo_from_record(raw, line, spec)?;
        if !seen.insert(demo.demo_id.clone()) {
            return Err(CorpusError::DuplicateDemoId {
                line,
                id: demo.demo_id,
            });
        }
        out.push(demo);
    }
    Ok(out)
}
