use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Flatten a conversation into the text that mock matchers run against:
/// each message as `<role>:\n<content>\n`, separated by blank lines.
pub fn transcript(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .map(|m| format!("{}:\n{}\n", m.role.as_str(), m.content))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[serde(rename = "detect_1")]
    Detect1,
    #[serde(rename = "detect_2")]
    Detect2,
    Summarize,
    Classgen,
    ClassifySummarize,
    ClassifyFit,
    ClassifyFinal,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Detect1,
        Stage::Detect2,
        Stage::Summarize,
        Stage::Classgen,
        Stage::ClassifySummarize,
        Stage::ClassifyFit,
        Stage::ClassifyFinal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Detect1 => "detect_1",
            Stage::Detect2 => "detect_2",
            Stage::Summarize => "summarize",
            Stage::Classgen => "classgen",
            Stage::ClassifySummarize => "classify_summarize",
            Stage::ClassifyFit => "classify_fit",
            Stage::ClassifyFinal => "classify_final",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// What a placeholder is filled with. Templates keep the original spelling of
/// their placeholders (`[SENTENCE]`, `[Paragraph]`, `[ARTICLE]`, ...) and map
/// each one to a slot, so stage code binds by meaning rather than spelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Title,
    Text,
    Thoughts,
    Summary,
    Summaries,
    ClassName,
    ClassPrompt,
    Candidates,
    Rationales,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("missing binding for placeholder [{0}]")]
    MissingBinding(String),
    #[error("binding {0:?} does not match any placeholder in the template")]
    UnknownPlaceholder(String),
    #[error("placeholder [{0}] has no slot mapping")]
    UnmappedPlaceholder(String),
    #[error("slot mapping names [{0}], which the template does not use")]
    StaleSlot(String),
    #[error("message {0} renders to empty content")]
    EmptyMessage(usize),
    #[error("template must start with a system message")]
    NoSystemMessage,
    #[error("invalid template file: {0}")]
    Parse(String),
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[([A-Za-z][A-Za-z0-9_ ]*)\]").expect("static regex"))
}

fn placeholder_name(raw: &str) -> String {
    raw.trim().to_string()
}

#[derive(Debug, Clone, Deserialize)]
struct TemplateFile {
    id: String,
    stage: Stage,
    #[serde(default)]
    slots: BTreeMap<String, Slot>,
    messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: String,
    pub stage: Stage,
    pub messages: Vec<ChatMessage>,
    pub placeholders: BTreeSet<String>,
    pub slots: BTreeMap<String, Slot>,
    /// sha256 of the file the template was parsed from.
    pub content_hash: String,
}

impl PromptTemplate {
    pub fn new(
        template_id: impl Into<String>,
        stage: Stage,
        messages: Vec<ChatMessage>,
        slots: BTreeMap<String, Slot>,
    ) -> Result<Self, TemplateError> {
        if messages.first().map(|m| m.role) != Some(Role::System) {
            return Err(TemplateError::NoSystemMessage);
        }
        let placeholders: BTreeSet<String> = messages
            .iter()
            .flat_map(|m| {
                placeholder_re()
                    .captures_iter(&m.content)
                    .map(|c| placeholder_name(&c[1]))
            })
            .collect();
        for p in &placeholders {
            if !slots.is_empty() && !slots.contains_key(p) {
                return Err(TemplateError::UnmappedPlaceholder(p.clone()));
            }
        }
        for s in slots.keys() {
            if !placeholders.contains(s) {
                return Err(TemplateError::StaleSlot(s.clone()));
            }
        }
        let mut hasher = Sha256::new();
        for m in &messages {
            hasher.update(m.role.as_str());
            hasher.update([0]);
            hasher.update(&m.content);
            hasher.update([0]);
        }
        Ok(Self {
            template_id: template_id.into(),
            stage,
            messages,
            placeholders,
            slots,
            content_hash: hex::encode(hasher.finalize()),
        })
    }

    /// Parse the TOML template format (`id`, `stage`, `[slots]`, `[[messages]]`).
    pub fn from_toml(src: &str) -> Result<Self, TemplateError> {
        let file: TemplateFile = toml::from_str(src).map_err(|e| TemplateError::Parse(e.to_string()))?;
        let mut t = Self::new(file.id, file.stage, file.messages, file.slots)?;
        t.content_hash = hex::encode(Sha256::digest(src.as_bytes()));
        Ok(t)
    }

    /// Substitute `[NAME]` placeholders verbatim. Every placeholder must be
    /// bound and every binding must name a placeholder. Substitution is a
    /// single pass, so bound text is never re-scanned for placeholders.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<Vec<ChatMessage>, TemplateError> {
        for key in bindings.keys() {
            if !self.placeholders.contains(&placeholder_name(key)) {
                return Err(TemplateError::UnknownPlaceholder(key.clone()));
            }
        }
        let bound: BTreeMap<String, &str> = bindings
            .iter()
            .map(|(k, v)| (placeholder_name(k), v.as_str()))
            .collect();
        if let Some(missing) = self.placeholders.iter().find(|p| !bound.contains_key(*p)) {
            return Err(TemplateError::MissingBinding(missing.clone()));
        }
        let mut out = Vec::with_capacity(self.messages.len());
        for (i, m) in self.messages.iter().enumerate() {
            let content = placeholder_re()
                .replace_all(&m.content, |c: &regex::Captures<'_>| {
                    bound[&placeholder_name(&c[1])].to_string()
                })
                .into_owned();
            if content.trim().is_empty() {
                return Err(TemplateError::EmptyMessage(i));
            }
            out.push(ChatMessage { role: m.role, content });
        }
        Ok(out)
    }

    /// Render by slot. Slots the template does not use are ignored.
    pub fn render_slots(&self, values: &BTreeMap<Slot, String>) -> Result<Vec<ChatMessage>, TemplateError> {
        let mut bindings = BTreeMap::new();
        for p in &self.placeholders {
            let slot = self
                .slots
                .get(p)
                .ok_or_else(|| TemplateError::UnmappedPlaceholder(p.clone()))?;
            if let Some(v) = values.get(slot) {
                bindings.insert(p.clone(), v.clone());
            }
        }
        self.render(&bindings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple() -> PromptTemplate {
        PromptTemplate::new(
            "t",
            Stage::Detect1,
            vec![
                ChatMessage::system("Judge the sentence."),
                ChatMessage::user("Debate Title: [Title ]\n\nText: [SENTENCE]"),
            ],
            BTreeMap::from([("Title".into(), Slot::Title), ("SENTENCE".into(), Slot::Text)]),
        )
        .unwrap()
    }

    fn b(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn substitutes_verbatim() {
        let msgs = simple()
            .render(&b(&[("SENTENCE", "AI is risky."), ("Title", "T")]))
            .unwrap();
        assert_eq!(msgs[1].content, "Debate Title: T\n\nText: AI is risky.");
    }

    #[test]
    fn bound_text_is_not_rescanned() {
        let msgs = simple()
            .render(&b(&[("SENTENCE", "[Title] stays"), ("Title", "x")]))
            .unwrap();
        assert!(msgs[1].content.ends_with("[Title] stays"));
    }

    #[test]
    fn missing_binding_names_placeholder() {
        let err = simple().render(&b(&[("SENTENCE", "x")])).unwrap_err();
        assert_eq!(err, TemplateError::MissingBinding("Title".into()));
        assert!(err.to_string().contains("[Title]"));
    }

    #[test]
    fn unknown_binding_is_rejected() {
        let err = simple()
            .render(&b(&[("SENTENCE", "x"), ("Title", "t"), ("SENTANCE", "typo")]))
            .unwrap_err();
        assert_eq!(err, TemplateError::UnknownPlaceholder("SENTANCE".into()));
    }

    #[test]
    fn must_start_with_system() {
        let err = PromptTemplate::new("t", Stage::Detect1, vec![ChatMessage::user("hi")], BTreeMap::new()).unwrap_err();
        assert_eq!(err, TemplateError::NoSystemMessage);
    }

    #[test]
    fn slot_rendering() {
        let values = BTreeMap::from([(Slot::Title, "Debate".to_string()), (Slot::Text, "Body.".to_string())]);
        let msgs = simple().render_slots(&values).unwrap();
        assert_eq!(msgs[1].content, "Debate Title: Debate\n\nText: Body.");
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let src = "id = \"x\"\nstage = \"summarize\"\n[slots]\n\"SENTENCE\" = \"text\"\n\n[[messages]]\nrole = \"system\"\ncontent = \"Sum.\"\n\n[[messages]]\nrole = \"user\"\ncontent = \"Summarize [SENTENCE]\"\n";
        let t = PromptTemplate::from_toml(src).unwrap();
        assert_eq!(t.stage, Stage::Summarize);
        assert_eq!(t.placeholders, BTreeSet::from(["SENTENCE".to_string()]));
        let edited = PromptTemplate::from_toml(&src.replace("Sum.", "Summarize.")).unwrap();
        assert_ne!(t.content_hash, edited.content_hash);
    }

    #[test]
    fn stale_slot_is_rejected() {
        let err = PromptTemplate::new(
            "t",
            Stage::Summarize,
            vec![ChatMessage::system("s"), ChatMessage::user("[A]")],
            BTreeMap::from([("A".into(), Slot::Text), ("B".into(), Slot::Title)]),
        )
        .unwrap_err();
        assert_eq!(err, TemplateError::StaleSlot("B".into()));
    }
}
