//! Two-interaction presence check: free-text thoughts, then a yes/no verdict.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusUnit;
use crate::gateway::{Slot, Stage};
use crate::stage::{StageContext, StageError};

pub const YES_NO_CORRECTION: &str = "Please answer with just Yes or No.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum YesNo {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum YesNoError {
    #[error("reply does not start with yes or no: {0:?}")]
    Neither(String),
    #[error("reply contains both yes and no: {0:?}")]
    Ambiguous(String),
}

/// Case-insensitive; the first alphabetic token must be yes or no and the
/// other answer must not appear anywhere else in the reply.
pub fn parse_yes_no(raw: &str) -> Result<YesNo, YesNoError> {
    let words: Vec<String> = raw
        .split(|c: char| !c.is_alphabetic())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let first = match words.first().map(String::as_str) {
        Some("yes") => YesNo::Yes,
        Some("no") => YesNo::No,
        _ => return Err(YesNoError::Neither(raw.to_string())),
    };
    let other = if first == YesNo::Yes { "no" } else { "yes" };
    if words.iter().any(|w| w == other) {
        return Err(YesNoError::Ambiguous(raw.to_string()));
    }
    Ok(first)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectLabel {
    Yes,
    No,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub unit_id: String,
    pub thoughts: String,
    pub label: DetectLabel,
    pub stage_template_ids: (String, String),
    /// Model calls spent on the verdict (the thoughts call is not counted).
    pub attempt_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn detect(ctx: &StageContext<'_>, unit: &CorpusUnit) -> Result<DetectionRecord, StageError> {
    let mut values = BTreeMap::from([(Slot::Title, unit.title.clone()), (Slot::Text, unit.text.clone())]);
    let template_ids = (ctx.template_id(Stage::Detect1), ctx.template_id(Stage::Detect2));
    let failed = |thoughts: String, attempts: u32, reason: String| DetectionRecord {
        unit_id: unit.unit_id.clone(),
        thoughts,
        label: DetectLabel::Failed,
        stage_template_ids: template_ids.clone(),
        attempt_count: attempts,
        error: Some(reason),
    };

    let first = ctx.request(Stage::Detect1, &unit.unit_id, ctx.render(Stage::Detect1, &values)?);
    let thoughts = match ctx.ask(first, "Provide some thoughts.", |r| {
        Ok::<_, String>(r.trim().to_string())
    })? {
        Ok(a) => a.value,
        Err(f) => return Ok(failed(String::new(), 0, f.reason)),
    };

    values.insert(Slot::Thoughts, thoughts.clone());
    // the second template replays the first exchange with the thoughts as the assistant turn
    let messages = ctx.render(Stage::Detect2, &values)?;
    let second = ctx.request(Stage::Detect2, &unit.unit_id, messages);
    Ok(match ctx.ask(second, YES_NO_CORRECTION, parse_yes_no)? {
        Ok(a) => DetectionRecord {
            unit_id: unit.unit_id.clone(),
            thoughts,
            label: match a.value {
                YesNo::Yes => DetectLabel::Yes,
                YesNo::No => DetectLabel::No,
            },
            stage_template_ids: template_ids,
            attempt_count: a.attempts,
            error: None,
        },
        Err(f) => failed(thoughts, f.attempts, f.reason),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yes_no_oracles() {
        assert_eq!(parse_yes_no("Yes"), Ok(YesNo::Yes));
        assert_eq!(parse_yes_no(" no."), Ok(YesNo::No));
        assert_eq!(parse_yes_no("No."), Ok(YesNo::No));
        assert_eq!(parse_yes_no("YES, a frame is present"), Ok(YesNo::Yes));
        assert!(matches!(parse_yes_no("Yes and no"), Err(YesNoError::Ambiguous(_))));
        assert!(matches!(parse_yes_no("It depends"), Err(YesNoError::Neither(_))));
        assert!(matches!(parse_yes_no(""), Err(YesNoError::Neither(_))));
        assert!(matches!(parse_yes_no("Yesterday"), Err(YesNoError::Neither(_))));
    }
}
