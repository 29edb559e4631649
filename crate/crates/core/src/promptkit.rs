//! Prompt rendering per model family and label serialization.
//!
//! Every family is built from the same role-tagged message list:
//!
//! ```text
//! [system]                              (llama2, qwen; optional for generic)
//! user:      {task description}\n{first demo input}
//! assistant: Label: {first demo label}
//! user:      {next demo input}
//! assistant: Label: {next demo label}
//! ...
//! user:      {test input}
//! ```
//!
//! A single-text input renders as `Sentence: {text}`; a pair as
//! `Sentence1: {a}\nSentence2: {b}`. The flattened text never ends in a
//! newline. Whitespace placement is frozen by the golden fixtures under
//! `tests/fixtures/golden`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Demonstration, Entity, Label, TaskKind, TaskSpec, TextInput};

/// Trailing line that routes a prompt to a mock prediction.
pub const TEST_TAG_PREFIX: &str = "# test:";

/// Text placed before the serialized label in every assistant turn.
pub const LABEL_CUE: &str = "Label: ";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("template family {0} requires a system message")]
    MissingSystemMessage(&'static str),
    #[error("demonstration {demo_id:?} does not fit task {task_id:?}: {reason}")]
    DemoKindMismatch {
        demo_id: String,
        task_id: String,
        reason: String,
    },
    #[error("the invalid label has no serialization")]
    InvalidLabelVariant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    #[default]
    #[serde(alias = "mixtral")]
    MixtralInst,
    #[serde(alias = "llama2")]
    Llama2Chat,
    #[serde(alias = "qwen")]
    QwenChatml,
    #[serde(alias = "messages")]
    GenericMessages,
}

impl TemplateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::MixtralInst => "mixtral",
            TemplateKind::Llama2Chat => "llama2",
            TemplateKind::QwenChatml => "qwen",
            TemplateKind::GenericMessages => "messages",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mixtral" | "mixtral_inst" => Some(TemplateKind::MixtralInst),
            "llama2" | "llama2_chat" => Some(TemplateKind::Llama2Chat),
            "qwen" | "qwen_chatml" => Some(TemplateKind::QwenChatml),
            "messages" | "generic_messages" => Some(TemplateKind::GenericMessages),
            _ => None,
        }
    }

    fn requires_system(self) -> bool {
        matches!(self, TemplateKind::Llama2Chat | TemplateKind::QwenChatml)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TemplateFamily {
    pub kind: TemplateKind,
    #[serde(default)]
    pub system_message: Option<String>,
}

impl TemplateFamily {
    pub fn new(kind: TemplateKind, system_message: Option<String>) -> Self {
        Self { kind, system_message }
    }

    fn system(&self) -> Result<Option<&str>, PromptError> {
        let sys = self.system_message.as_deref().filter(|s| !s.is_empty());
        match (self.kind, sys) {
            (TemplateKind::MixtralInst, _) => Ok(None),
            (k, None) if k.requires_system() => Err(PromptError::MissingSystemMessage(k.as_str())),
            (_, s) => Ok(s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub family: TemplateKind,
    pub text: String,
    pub messages: Vec<Message>,
    pub test_id_tag: Option<String>,
}

impl RenderedPrompt {
    /// A bare text prompt with no structure, for ad-hoc generation.
    pub fn plain(text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            family: TemplateKind::MixtralInst,
            messages: vec![Message::new(Role::User, text.clone())],
            text,
            test_id_tag: None,
        }
    }
}

fn input_block(input: TextInput<'_>) -> String {
    match input.secondary {
        Some(s2) => format!("Sentence1: {}\nSentence2: {}", input.primary, s2),
        None => format!("Sentence: {}", input.primary),
    }
}

fn check_input(id: &str, input: TextInput<'_>, spec: &TaskSpec) -> Result<(), PromptError> {
    let pair = spec.kind == TaskKind::SentencePairInference;
    if pair != input.secondary.is_some() {
        return Err(PromptError::DemoKindMismatch {
            demo_id: id.to_string(),
            task_id: spec.task_id.clone(),
            reason: if pair {
                "missing second sentence".into()
            } else {
                "unexpected second sentence".into()
            },
        });
    }
    Ok(())
}

fn check_label(id: &str, label: &Label, spec: &TaskSpec) -> Result<(), PromptError> {
    let fits = match label {
        Label::ClassName(_) => spec.kind.is_classification(),
        Label::Entities(_) => spec.kind == TaskKind::EntityExtraction,
        Label::Invalid => return Err(PromptError::InvalidLabelVariant),
    };
    if fits {
        Ok(())
    } else {
        Err(PromptError::DemoKindMismatch {
            demo_id: id.to_string(),
            task_id: spec.task_id.clone(),
            reason: "label variant does not match task kind".into(),
        })
    }
}

fn build_messages(
    family: &TemplateFamily,
    spec: &TaskSpec,
    demos: &[&Demonstration],
    test_input: TextInput<'_>,
) -> Result<Vec<Message>, PromptError> {
    let mut msgs = Vec::with_capacity(2 * demos.len() + 2);
    if let Some(sys) = family.system()? {
        msgs.push(Message::new(Role::System, sys));
    }
    let mut first = true;
    let mut user = |block: String| {
        if std::mem::take(&mut first) {
            Message::new(Role::User, format!("{}\n{}", spec.task_description, block))
        } else {
            Message::new(Role::User, block)
        }
    };
    for d in demos {
        check_input(&d.demo_id, d.input(), spec)?;
        check_label(&d.demo_id, &d.gold, spec)?;
        msgs.push(user(input_block(d.input())));
        msgs.push(Message::new(
            Role::Assistant,
            format!("{LABEL_CUE}{}", serialize_label(&d.gold)?),
        ));
    }
    check_input("<test>", test_input, spec)?;
    msgs.push(user(input_block(test_input)));
    Ok(msgs)
}

/// Flattens messages (ending in a user turn) into the family's text form,
/// including the generation cue after the final user turn.
fn flatten(kind: TemplateKind, msgs: &[Message]) -> String {
    let mut out = String::new();
    let (system, turns) = match msgs.first() {
        Some(m) if m.role == Role::System => (Some(m.content.as_str()), &msgs[1..]),
        _ => (None, msgs),
    };
    match kind {
        TemplateKind::MixtralInst | TemplateKind::Llama2Chat => {
            let llama = kind == TemplateKind::Llama2Chat;
            for (i, m) in turns.iter().enumerate() {
                match m.role {
                    Role::User => {
                        if llama {
                            out.push_str("<s>");
                        }
                        out.push_str("[INST]");
                        if let (true, 0, Some(sys)) = (llama, i, system) {
                            let _ = writeln!(out, " <<SYS>> {sys}<</SYS>>");
                        }
                        out.push_str(&m.content);
                        out.push_str("[/INST]");
                    }
                    Role::Assistant => {
                        out.push_str(&m.content);
                        out.push_str("</s>");
                    }
                    Role::System => {}
                }
            }
        }
        TemplateKind::QwenChatml => {
            let mut turns_out: Vec<String> = msgs
                .iter()
                .map(|m| format!("<|im_start|>{} {}<|im_end|>", m.role.as_str(), m.content))
                .collect();
            turns_out.push("<|im_start|>assistant ".into());
            out = turns_out.join("\n");
        }
        TemplateKind::GenericMessages => {
            let mut lines: Vec<String> = msgs
                .iter()
                .map(|m| format!("{}: {}", m.role.as_str(), m.content))
                .collect();
            lines.push("assistant: ".into());
            out = lines.join("\n");
        }
    }
    out
}

/// Renders demonstrations (in the given order) followed by the test input.
///
/// `test_id_tag` appends a final `# test:<id>` line; pass it only for the
/// mock backend.
pub fn render(
    family: &TemplateFamily,
    spec: &TaskSpec,
    demos: &[&Demonstration],
    test_input: TextInput<'_>,
    test_id_tag: Option<&str>,
) -> Result<RenderedPrompt, PromptError> {
    let messages = build_messages(family, spec, demos, test_input)?;
    let mut text = flatten(family.kind, &messages);
    if let Some(tag) = test_id_tag {
        let _ = write!(text, "\n{TEST_TAG_PREFIX}{tag}");
    }
    Ok(RenderedPrompt {
        family: family.kind,
        text,
        messages,
        test_id_tag: test_id_tag.map(str::to_string),
    })
}

/// The instruction-wrapped input of one demonstration, up to the label cue,
/// and its serialized gold label as the continuation to score.
pub fn render_scoring_pair(
    family: &TemplateFamily,
    spec: &TaskSpec,
    demo: &Demonstration,
) -> Result<(String, String), PromptError> {
    check_label(&demo.demo_id, &demo.gold, spec)?;
    let mut prompt = render(family, spec, &[], demo.input(), None)
        .map_err(|e| match e {
            PromptError::DemoKindMismatch { task_id, reason, .. } => PromptError::DemoKindMismatch {
                demo_id: demo.demo_id.clone(),
                task_id,
                reason,
            },
            other => other,
        })?
        .text;
    prompt.push_str(LABEL_CUE);
    Ok((prompt, serialize_label(&demo.gold)?))
}

/// Canonical label text: the class name, or a Python-style list of
/// `['span', 'type']` pairs.
pub fn serialize_label(label: &Label) -> Result<String, PromptError> {
    match label {
        Label::ClassName(c) => Ok(c.to_lowercase()),
        Label::Entities(es) => {
            let pairs: Vec<String> = es
                .iter()
                .map(|e| format!("[{}, {}]", py_repr(&e.span), py_repr(&e.entity_type)))
                .collect();
            Ok(format!("[{}]", pairs.join(", ")))
        }
        Label::Invalid => Err(PromptError::InvalidLabelVariant),
    }
}

/// Python `repr` of a string: single quotes unless the text contains a
/// single quote and no double quote.
pub fn py_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c if (c as u32) < 0x20 || c as u32 == 0x7f => {
                let _ = write!(out, "\\x{:02x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

/// Byte range of the first `[` ... matching `]` in `s`, skipping brackets
/// inside quoted strings.
pub(crate) fn first_balanced_list(s: &str) -> Option<&str> {
    let start = s.find('[')?;
    let mut depth = 0usize;
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in s[start..].char_indices() {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '\'' | '"' => quote = Some(c),
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&s[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

struct Cursor<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while self.chars.next_if(|c| c.is_whitespace()).is_some() {}
    }

    fn eat(&mut self, want: char) -> Option<()> {
        self.skip_ws();
        self.chars.next_if_eq(&want).map(|_| ())
    }

    fn string(&mut self) -> Option<String> {
        self.skip_ws();
        let q = self.chars.next_if(|&c| c == '\'' || c == '"')?;
        let mut out = String::new();
        loop {
            match self.chars.next()? {
                c if c == q => return Some(out),
                '\\' => match self.chars.next()? {
                    'n' => out.push('\n'),
                    'r' => out.push('\r'),
                    't' => out.push('\t'),
                    '\\' => out.push('\\'),
                    '\'' => out.push('\''),
                    '"' => out.push('"'),
                    'x' => {
                        let hex: String = [self.chars.next()?, self.chars.next()?].iter().collect();
                        out.push(char::from_u32(u32::from_str_radix(&hex, 16).ok()?)?);
                    }
                    other => {
                        out.push('\\');
                        out.push(other);
                    }
                },
                c => out.push(c),
            }
        }
    }

    /// `[ ['a', 'T'], ... ]` with optional trailing commas.
    fn pair_list(&mut self) -> Option<Vec<(String, String)>> {
        self.eat('[')?;
        let mut out = Vec::new();
        loop {
            if self.eat(']').is_some() {
                return Some(out);
            }
            self.eat('[')?;
            let span = self.string()?;
            self.eat(',')?;
            let ty = self.string()?;
            let _ = self.eat(',');
            self.eat(']')?;
            out.push((span, ty));
            if self.eat(',').is_none() {
                self.eat(']')?;
                return Some(out);
            }
        }
    }
}

/// Parses a complete Python-style list of string pairs; `None` when the text
/// is anything else.
pub(crate) fn parse_pair_list(s: &str) -> Option<Vec<(String, String)>> {
    let mut cur = Cursor { chars: s.chars().peekable() };
    let out = cur.pair_list()?;
    cur.skip_ws();
    cur.chars.next().is_none().then_some(out)
}

/// Entity label from a serialized list, keeping spans verbatim.
pub fn parse_entity_list(s: &str) -> Option<Vec<Entity>> {
    parse_pair_list(s).map(|ps| ps.into_iter().map(|(a, b)| Entity::new(a, b)).collect())
}
