//! Staged classification: a fresh summary, a Likert fit rating per class,
//! and a one-or-two-label verdict among the best-fitting classes.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::gateway::{extract_json, Slot, Stage, JSON_CORRECTION};
use crate::review::FinalClass;
use crate::stage::{StageContext, StageError, StageFailure};

/// Step Three sees at most this many tied classes.
pub const MAX_FINAL_CANDIDATES: usize = 4;

pub const FINAL_CORRECTION: &str =
    "Respond with ONLY the FRAMES that fit best, exactly as named in the list, in the format <FRAME> OR <FRAME 1 | FRAME 2>.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitRating {
    pub unit_id: String,
    pub class_name: String,
    pub rationale: String,
    pub fit: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FitParseError {
    #[error("no JSON object: {0}")]
    Json(String),
    #[error("missing \"Fit\" field")]
    MissingFit,
    #[error("Fit {0} is not an integer")]
    NotInteger(String),
    #[error("Fit {0} outside 1..=7")]
    OutOfRange(i64),
}

/// `{"Rationale": ..., "Fit": ..., "Frame": ...}`. Keys match case-insensitively;
/// Fit may be an integer or a string holding one.
pub fn parse_fit(raw: &str) -> Result<(String, u8), FitParseError> {
    let obj = extract_json(raw).map_err(|e| FitParseError::Json(e.to_string()))?;
    let get = |name: &str| {
        obj.iter()
            .find(|(k, _)| k.trim().eq_ignore_ascii_case(name))
            .map(|(_, v)| v)
    };
    let fit = match get("Fit").ok_or(FitParseError::MissingFit)? {
        Value::Number(n) => match n.as_i64() {
            Some(i) => i,
            None => return Err(FitParseError::NotInteger(n.to_string())),
        },
        Value::String(s) => s
            .trim()
            .parse::<i64>()
            .map_err(|_| FitParseError::NotInteger(format!("{s:?}")))?,
        other => return Err(FitParseError::NotInteger(other.to_string())),
    };
    if !(1..=7).contains(&fit) {
        return Err(FitParseError::OutOfRange(fit));
    }
    let rationale = match get("Rationale") {
        Some(Value::String(s)) => s.trim().to_string(),
        Some(other) => other.to_string(),
        None => String::new(),
    };
    Ok((rationale, fit as u8))
}

pub fn rate_fit(
    ctx: &StageContext<'_>,
    unit_id: &str,
    text: &str,
    long_summary: &str,
    class: &FinalClass,
) -> Result<Result<FitRating, StageFailure>, StageError> {
    let values = BTreeMap::from([
        (Slot::Text, text.to_string()),
        (Slot::Summary, long_summary.to_string()),
        (Slot::ClassName, class.name.clone()),
        (Slot::ClassPrompt, class.prompt.clone()),
    ]);
    let key = format!("{unit_id}::{}", class.name);
    let request = ctx.request(Stage::ClassifyFit, &key, ctx.render(Stage::ClassifyFit, &values)?);
    let asked = ctx.ask(request, JSON_CORRECTION, parse_fit)?;
    Ok(asked.map(|a| FitRating {
        unit_id: unit_id.to_string(),
        class_name: class.name.clone(),
        rationale: a.value.0,
        fit: a.value.1,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitProfile {
    pub unit_id: String,
    pub ratings: Vec<FitRating>,
    /// Classes whose rating failed; they do not count towards `m`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_classes: Vec<String>,
    pub m: usize,
    pub mean_fit: f64,
    pub max_fit: u8,
    pub argmax_classes: Vec<String>,
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProfileError {
    #[error("no successful ratings")]
    NoRatings,
}

/// Mean and argmax over the successful ratings. The sum is exact, so the
/// mean is the correctly rounded quotient.
pub fn build_profile(
    unit_id: &str,
    ratings: Vec<FitRating>,
    failed_classes: Vec<String>,
) -> Result<FitProfile, ProfileError> {
    let max_fit = ratings.iter().map(|r| r.fit).max().ok_or(ProfileError::NoRatings)?;
    let m = ratings.len();
    let sum: u64 = ratings.iter().map(|r| u64::from(r.fit)).sum();
    let argmax_classes = ratings
        .iter()
        .filter(|r| r.fit == max_fit)
        .map(|r| r.class_name.clone())
        .collect();
    Ok(FitProfile {
        unit_id: unit_id.to_string(),
        partial: !failed_classes.is_empty(),
        failed_classes,
        m,
        mean_fit: sum as f64 / m as f64,
        max_fit,
        argmax_classes,
        ratings,
    })
}

/// Per-class mean fit over a set of profiles.
pub fn run_means<'a>(profiles: impl IntoIterator<Item = &'a FitProfile>) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for p in profiles {
        for r in &p.ratings {
            let e = acc.entry(r.class_name.clone()).or_default();
            e.0 += u64::from(r.fit);
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s as f64 / n as f64)).collect()
}

/// The classes Step Three chooses between: the argmax set ordered by the
/// class's run-wide mean fit (descending) then name, capped at
/// [`MAX_FINAL_CANDIDATES`].
pub fn final_candidates(profile: &FitProfile, run_means: &BTreeMap<String, f64>) -> Vec<String> {
    let mut c = profile.argmax_classes.clone();
    c.sort_by(|a, b| {
        let ma = run_means.get(a).copied().unwrap_or(0.0);
        let mb = run_means.get(b).copied().unwrap_or(0.0);
        mb.partial_cmp(&ma).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b))
    });
    c.truncate(MAX_FINAL_CANDIDATES);
    c
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FinalParseError {
    #[error("empty answer")]
    Empty,
    #[error("more than two labels in {0:?}")]
    TooMany(String),
    #[error("{0:?} is not one of the presented classes")]
    NotPresented(String),
    #[error("label {0:?} repeated")]
    Duplicate(String),
}

/// Parse `<A>` or `<A | B>` against the presented names. Matching is exact
/// after trimming and ignores case; the presented spelling is returned.
pub fn parse_final(raw: &str, presented: &[String]) -> Result<Vec<String>, FinalParseError> {
    let strip = |s: &str| {
        s.trim()
            .trim_start_matches('<')
            .trim_end_matches('>')
            .trim()
            .to_string()
    };
    let body = strip(raw);
    if body.is_empty() {
        return Err(FinalParseError::Empty);
    }
    let parts: Vec<String> = body.split('|').map(strip).collect();
    if parts.len() > 2 {
        return Err(FinalParseError::TooMany(raw.trim().to_string()));
    }
    let mut labels: Vec<String> = Vec::new();
    for p in parts {
        let hit = presented
            .iter()
            .find(|c| c.trim().to_lowercase() == p.to_lowercase())
            .ok_or_else(|| FinalParseError::NotPresented(p.clone()))?;
        if labels.contains(hit) {
            return Err(FinalParseError::Duplicate(hit.clone()));
        }
        labels.push(hit.clone());
    }
    Ok(labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    DetectionNo,
    FinalSelect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub unit_id: String,
    pub labels: Vec<String>,
    pub source: LabelSource,
    /// Whether the Step Three call was made (false for a single best class).
    pub step_three: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub presented: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_profile: Option<FitProfile>,
}

pub fn none_result(unit_id: &str, none_class: &str) -> ClassificationResult {
    ClassificationResult {
        unit_id: unit_id.to_string(),
        labels: vec![none_class.to_string()],
        source: LabelSource::DetectionNo,
        step_three: false,
        presented: Vec::new(),
        fit_profile: None,
    }
}

/// Pick the label(s). A single best class is taken as is, with no model call.
pub fn final_select(
    ctx: &StageContext<'_>,
    text: &str,
    profile: &FitProfile,
    run_means: &BTreeMap<String, f64>,
) -> Result<Result<ClassificationResult, StageFailure>, StageError> {
    let presented = final_candidates(profile, run_means);
    let result = |labels: Vec<String>, step_three: bool| ClassificationResult {
        unit_id: profile.unit_id.clone(),
        labels,
        source: LabelSource::FinalSelect,
        step_three,
        presented: if step_three { presented.clone() } else { Vec::new() },
        fit_profile: Some(profile.clone()),
    };
    if presented.len() == 1 {
        return Ok(Ok(result(presented.clone(), false)));
    }
    let rationales = presented
        .iter()
        .filter_map(|name| profile.ratings.iter().find(|r| &r.class_name == name))
        .map(|r| format!("{}: {}", r.class_name, r.rationale))
        .collect::<Vec<_>>()
        .join("\n");
    let values = BTreeMap::from([
        (Slot::Text, text.to_string()),
        (
            Slot::Candidates,
            presented
                .iter()
                .map(|n| format!("<{n}>"))
                .collect::<Vec<_>>()
                .join(", "),
        ),
        (Slot::Rationales, rationales),
    ]);
    let request = ctx.request(
        Stage::ClassifyFinal,
        &profile.unit_id,
        ctx.render(Stage::ClassifyFinal, &values)?,
    );
    let asked = ctx.ask(request, FINAL_CORRECTION, |raw| parse_final(raw, &presented))?;
    Ok(asked.map(|a| result(a.value, true)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rating(class: &str, fit: u8) -> FitRating {
        FitRating {
            unit_id: "u".into(),
            class_name: class.into(),
            rationale: format!("{class} reason"),
            fit,
        }
    }

    #[test]
    fn fit_oracles() {
        assert_eq!(
            parse_fit(r#"{"Rationale":"Directly discusses oversight.","Fit":"6","Frame":"AI Regulation"}"#),
            Ok(("Directly discusses oversight.".into(), 6))
        );
        assert_eq!(parse_fit(r#"{"Fit": 7}"#), Ok((String::new(), 7)));
        assert_eq!(parse_fit(r#"{"Fit":"8"}"#), Err(FitParseError::OutOfRange(8)));
        assert!(matches!(
            parse_fit(r#"{"Fit":"strongly agree"}"#),
            Err(FitParseError::NotInteger(_))
        ));
        assert!(matches!(
            parse_fit(r#"{"Fit": 5.5}"#),
            Err(FitParseError::NotInteger(_))
        ));
        assert_eq!(parse_fit(r#"{"Score": 5}"#), Err(FitParseError::MissingFit));
    }

    #[test]
    fn profile_arithmetic() {
        let p = build_profile("u", vec![rating("A", 7), rating("B", 1), rating("C", 4)], vec![]).unwrap();
        assert_eq!((p.mean_fit, p.max_fit, p.argmax_classes.len()), (4.0, 7, 1));
        let ties: Vec<FitRating> = ["A", "B", "C", "D", "E"].iter().map(|c| rating(c, 4)).collect();
        assert_eq!(build_profile("u", ties, vec![]).unwrap().argmax_classes.len(), 5);
        let ten: Vec<FitRating> = (0..10).map(|i| rating(&format!("C{i}"), 3)).collect();
        let p = build_profile("u", ten, vec!["C10".into()]).unwrap();
        assert_eq!((p.m, p.partial), (10, true));
        assert_eq!(
            build_profile("u", vec![], vec!["A".into()]),
            Err(ProfileError::NoRatings)
        );
    }

    #[test]
    fn candidates_break_ties_by_run_mean_then_name() {
        let ratings = ["E", "D", "C", "B", "A"].iter().map(|c| rating(c, 6)).collect();
        let p = build_profile("u", ratings, vec![]).unwrap();
        let means = BTreeMap::from([("C".to_string(), 5.0), ("E".to_string(), 4.0)]);
        assert_eq!(final_candidates(&p, &means), vec!["C", "E", "A", "B"]);
    }

    #[test]
    fn final_answer_format() {
        let presented: Vec<String> = ["AI Risks", "AI Ethics", "AI Regulation"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(
            parse_final("AI Risks | AI Ethics", &presented).unwrap(),
            vec!["AI Risks", "AI Ethics"]
        );
        assert_eq!(parse_final("<ai risks>", &presented).unwrap(), vec!["AI Risks"]);
        assert_eq!(
            parse_final(" <AI Risks | AI Regulation> ", &presented).unwrap().len(),
            2
        );
        assert!(matches!(
            parse_final("AI Hype", &presented),
            Err(FinalParseError::NotPresented(_))
        ));
        assert!(matches!(
            parse_final("A | B | C", &presented),
            Err(FinalParseError::TooMany(_))
        ));
        assert!(matches!(
            parse_final("AI Risks | ai risks", &presented),
            Err(FinalParseError::Duplicate(_))
        ));
        assert_eq!(parse_final("  ", &presented), Err(FinalParseError::Empty));
    }
}
