//! Per-unit construct summaries: short ones seed class generation, long
//! ones open the classification conversation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusUnit, SentenceSplitter};
use crate::gateway::{Slot, Stage};
use crate::prompts::LengthSpec;
use crate::stage::{StageContext, StageError, StageFailure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryKind {
    ShortForGeneration,
    LongForClassification,
}

impl SummaryKind {
    pub fn stage(&self) -> Stage {
        match self {
            SummaryKind::ShortForGeneration => Stage::Summarize,
            SummaryKind::LongForClassification => Stage::ClassifySummarize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub unit_id: String,
    pub kind: SummaryKind,
    pub text: String,
    pub word_count: usize,
    pub length_spec: LengthSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub template_id: String,
    pub attempt_count: u32,
}

/// Whitespace-separated tokens after trimming.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Soft length check; the summary is kept either way.
pub fn length_warnings(text: &str, spec: LengthSpec) -> Vec<String> {
    match spec {
        LengthSpec::Words { min, max } => {
            let n = word_count(text);
            if n < min {
                vec![format!("under-length: {n} words, expected at least {min}")]
            } else if n > max {
                vec![format!("over-length: {n} words, expected at most {max}")]
            } else {
                Vec::new()
            }
        }
        LengthSpec::Sentences { max } => {
            let n = SentenceSplitter::default().split(text).len();
            if n > max {
                vec![format!("over-length: {n} sentences, expected at most {max}")]
            } else {
                Vec::new()
            }
        }
    }
}

pub fn summarize_unit(
    ctx: &StageContext<'_>,
    unit: &CorpusUnit,
    kind: SummaryKind,
    spec: LengthSpec,
) -> Result<Result<SummaryRecord, StageFailure>, StageError> {
    let stage = kind.stage();
    let values = BTreeMap::from([(Slot::Title, unit.title.clone()), (Slot::Text, unit.text.clone())]);
    let request = ctx.request(stage, &unit.unit_id, ctx.render(stage, &values)?);
    let asked = ctx.ask(request, "Please write the summary.", |r| {
        Ok::<_, String>(r.trim().to_string())
    })?;
    Ok(asked.map(|a| SummaryRecord {
        unit_id: unit.unit_id.clone(),
        kind,
        word_count: word_count(&a.value),
        warnings: length_warnings(&a.value, spec),
        text: a.value,
        length_spec: spec,
        template_id: ctx.template_id(stage),
        attempt_count: a.attempts,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_limits_are_soft() {
        let spec = LengthSpec::Words { min: 3, max: 10 };
        assert_eq!(word_count("  AI threatens jobs without regulation "), 5);
        assert!(length_warnings("AI threatens jobs without regulation", spec).is_empty());
        let long = "one two three four five six seven eight nine ten eleven twelve thirteen fourteen";
        assert_eq!(word_count(long), 14);
        let w = length_warnings(long, spec);
        assert_eq!(w.len(), 1);
        assert!(w[0].starts_with("over-length"));
    }

    #[test]
    fn sentence_limit() {
        let spec = LengthSpec::Sentences { max: 2 };
        assert!(length_warnings("The article covers hockey. It reviews the playoffs.", spec).is_empty());
        assert_eq!(length_warnings("One. Two. Three.", spec).len(), 1);
    }
}
