//! Pipeline kinds and the prompt templates that drive them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Granularity;
use crate::gateway::{PromptTemplate, Stage, TemplateError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineKind {
    /// Frames over sentences (parliamentary speeches).
    FramesSentence,
    /// Frames over paragraphs (news coverage).
    FramesParagraph,
    /// Topics over whole articles.
    Topics,
}

/// Length instruction a summary is checked against. Violations are warnings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "unit", rename_all = "snake_case")]
pub enum LengthSpec {
    Words { min: usize, max: usize },
    Sentences { max: usize },
}

impl PipelineKind {
    pub const ALL: [PipelineKind; 3] = [
        PipelineKind::FramesSentence,
        PipelineKind::FramesParagraph,
        PipelineKind::Topics,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PipelineKind::FramesSentence => "frames_sentence",
            PipelineKind::FramesParagraph => "frames_paragraph",
            PipelineKind::Topics => "topics",
        }
    }

    pub fn granularity(&self) -> Granularity {
        match self {
            PipelineKind::FramesSentence => Granularity::Sentence,
            PipelineKind::FramesParagraph => Granularity::Paragraph,
            PipelineKind::Topics => Granularity::FullText,
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            PipelineKind::FramesSentence => 50,
            _ => 100,
        }
    }

    pub fn carryover(&self) -> f64 {
        0.2
    }

    pub fn class_cap(&self) -> usize {
        match self {
            PipelineKind::Topics => 21,
            _ => 9,
        }
    }

    pub fn short_summary_spec(&self) -> LengthSpec {
        match self {
            PipelineKind::FramesSentence => LengthSpec::Words { min: 3, max: 10 },
            PipelineKind::FramesParagraph => LengthSpec::Words { min: 8, max: 16 },
            PipelineKind::Topics => LengthSpec::Sentences { max: 2 },
        }
    }

    pub fn long_summary_spec(&self) -> LengthSpec {
        LengthSpec::Sentences { max: 2 }
    }

    /// Frames pipelines run the two-step presence check; topics classify every unit.
    pub fn has_detection(&self) -> bool {
        !matches!(self, PipelineKind::Topics)
    }

    pub fn none_class(&self) -> &'static str {
        match self {
            PipelineKind::Topics => "MISCELLANEOUS",
            _ => "No Frame",
        }
    }

    pub fn none_class_prompt(&self) -> &'static str {
        match self {
            PipelineKind::Topics => "The article does not fit any of the other topic categories.",
            _ => "The unit does not exhibit a frame.",
        }
    }

    /// Whether the reserved class is Likert-rated like any other class.
    pub fn rates_none_class(&self) -> bool {
        matches!(self, PipelineKind::Topics)
    }

    /// JSON key carrying the class name in generation replies.
    pub fn class_key(&self) -> &'static str {
        match self {
            PipelineKind::Topics => "topic",
            _ => "frame",
        }
    }

    pub fn stages(&self) -> &'static [Stage] {
        match self {
            PipelineKind::Topics => &[
                Stage::Summarize,
                Stage::Classgen,
                Stage::ClassifySummarize,
                Stage::ClassifyFit,
                Stage::ClassifyFinal,
            ],
            _ => &Stage::ALL,
        }
    }
}

impl fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PipelineKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown pipeline kind {s:?}"))
    }
}

macro_rules! builtin {
    ($kind:literal) => {
        [
            (
                "detect_1",
                include_str!(concat!("../templates/", $kind, "/detect_1.toml")),
            ),
            (
                "detect_2",
                include_str!(concat!("../templates/", $kind, "/detect_2.toml")),
            ),
            (
                "summarize",
                include_str!(concat!("../templates/", $kind, "/summarize.toml")),
            ),
            (
                "classgen",
                include_str!(concat!("../templates/", $kind, "/classgen.toml")),
            ),
            (
                "classify_summarize",
                include_str!(concat!("../templates/", $kind, "/classify_summarize.toml")),
            ),
            (
                "classify_fit",
                include_str!(concat!("../templates/", $kind, "/classify_fit.toml")),
            ),
            (
                "classify_final",
                include_str!(concat!("../templates/", $kind, "/classify_final.toml")),
            ),
        ]
    };
}

const TOPICS: [(&str, &str); 5] = [
    ("summarize", include_str!("../templates/topics/summarize.toml")),
    ("classgen", include_str!("../templates/topics/classgen.toml")),
    (
        "classify_summarize",
        include_str!("../templates/topics/classify_summarize.toml"),
    ),
    ("classify_fit", include_str!("../templates/topics/classify_fit.toml")),
    (
        "classify_final",
        include_str!("../templates/topics/classify_final.toml"),
    ),
];

/// The shipped template source for one stage, if the kind uses that stage.
pub fn builtin_source(kind: PipelineKind, stage: Stage) -> Option<&'static str> {
    let table: &[(&str, &str)] = match kind {
        PipelineKind::FramesSentence => &builtin!("frames_sentence"),
        PipelineKind::FramesParagraph => &builtin!("frames_paragraph"),
        PipelineKind::Topics => &TOPICS,
    };
    table.iter().find(|(s, _)| *s == stage.as_str()).map(|(_, src)| *src)
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template {name}: {source}")]
    Template {
        name: String,
        #[source]
        source: TemplateError,
    },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("template {name} declares stage {found}, expected {expected}")]
    StageMismatch {
        name: String,
        found: Stage,
        expected: Stage,
    },
    #[error("pipeline kind {kind} has no {stage} stage")]
    NoSuchStage { kind: PipelineKind, stage: Stage },
}

/// All templates for one pipeline kind.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub kind: PipelineKind,
    templates: BTreeMap<Stage, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin(kind: PipelineKind) -> Result<Self, PromptError> {
        Self::load(kind, None)
    }

    /// Built-in templates, with `<stage>.toml` files from `override_dir`
    /// replacing the shipped ones where present.
    pub fn load(kind: PipelineKind, override_dir: Option<&Path>) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for &stage in kind.stages() {
            let name = format!("{kind}/{stage}");
            let override_path = override_dir.map(|d| d.join(format!("{stage}.toml")));
            let src = match override_path.filter(|p| p.exists()) {
                Some(p) => std::fs::read_to_string(&p).map_err(|source| PromptError::Io {
                    path: p.display().to_string(),
                    source,
                })?,
                None => builtin_source(kind, stage)
                    .expect("every stage of a kind ships a template")
                    .to_string(),
            };
            let t = PromptTemplate::from_toml(&src).map_err(|source| PromptError::Template {
                name: name.clone(),
                source,
            })?;
            if t.stage != stage {
                return Err(PromptError::StageMismatch {
                    name,
                    found: t.stage,
                    expected: stage,
                });
            }
            templates.insert(stage, t);
        }
        Ok(Self { kind, templates })
    }

    pub fn get(&self, stage: Stage) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(&stage)
            .ok_or(PromptError::NoSuchStage { kind: self.kind, stage })
    }

    /// template id -> content hash, for provenance.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.templates
            .values()
            .map(|t| (t.template_id.clone(), t.content_hash.clone()))
            .collect()
    }
}
