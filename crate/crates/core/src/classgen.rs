//! Candidate class generation over overlapping batches of summaries, and
//! the merged candidate registry the reviewer works from.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::gateway::{extract_json, Slot, Stage, JSON_CORRECTION};
use crate::prompts::PipelineKind;
use crate::stage::{StageContext, StageError, StageFailure};

pub const REGISTRY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("no summaries to batch")]
    Empty,
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("carryover fraction {0} outside [0, 1)")]
    Carryover(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub carried: Vec<String>,
    pub fresh: Vec<String>,
}

impl Batch {
    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.carried.iter().chain(&self.fresh)
    }

    pub fn len(&self) -> usize {
        self.carried.len() + self.fresh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub carryover_fraction: f64,
    pub classes_per_call_cap: usize,
    pub rng_seed: u64,
    pub batches: Vec<Batch>,
}

/// Number of ids carried into every batch after the first. At least one
/// fresh slot is always left, so the plan terminates.
pub fn carried_per_batch(batch_size: usize, carryover_fraction: f64) -> usize {
    ((batch_size as f64 * carryover_fraction).round() as usize).min(batch_size.saturating_sub(1))
}

/// Shuffle the ids with the seed, then fill batches: the first takes
/// `batch_size` fresh ids; each later one carries a uniform sample from the
/// previous batch and tops up with fresh ids until the pool runs dry.
pub fn plan_batches(
    summary_ids: &[String],
    batch_size: usize,
    carryover_fraction: f64,
    classes_per_call_cap: usize,
    seed: u64,
) -> Result<BatchPlan, PlanError> {
    if summary_ids.is_empty() {
        return Err(PlanError::Empty);
    }
    if batch_size == 0 {
        return Err(PlanError::ZeroBatch);
    }
    if !(0.0..1.0).contains(&carryover_fraction) {
        return Err(PlanError::Carryover(carryover_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = summary_ids.to_vec();
    pool.shuffle(&mut rng);

    let carry_n = carried_per_batch(batch_size, carryover_fraction);
    let mut batches: Vec<Batch> = Vec::new();
    let mut next = 0;
    while next < pool.len() {
        let carried = match batches.last() {
            None => Vec::new(),
            Some(prev) => {
                let prev_ids: Vec<&String> = prev.ids().collect();
                let mut picks =
                    rand::seq::index::sample(&mut rng, prev_ids.len(), carry_n.min(prev_ids.len())).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|i| prev_ids[i].clone()).collect()
            }
        };
        let take = (batch_size - carried.len()).min(pool.len() - next);
        let fresh = pool[next..next + take].to_vec();
        next += take;
        batches.push(Batch { carried, fresh });
    }
    Ok(BatchPlan {
        batch_size,
        carryover_fraction,
        classes_per_call_cap,
        rng_seed: seed,
        batches,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassStatus {
    Proposed,
    Kept,
    Merged,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateClass {
    pub class_id: String,
    pub name: String,
    pub prompt: String,
    /// Distinct example units attributed to the class; the authoritative count.
    pub count: usize,
    /// Sum of the counts the model claimed. Kept for the record only.
    pub reported_count: u64,
    pub example_unit_ids: BTreeSet<String>,
    pub source_batches: BTreeSet<usize>,
    pub status: ClassStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merged_into: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_rank: Option<usize>,
}

impl CandidateClass {
    pub fn proposed(name: &str, prompt: &str, batch: usize) -> Self {
        Self {
            class_id: String::new(),
            name: name.to_string(),
            prompt: prompt.to_string(),
            count: 0,
            reported_count: 0,
            example_unit_ids: BTreeSet::new(),
            source_batches: BTreeSet::from([batch]),
            status: ClassStatus::Proposed,
            merged_into: None,
            final_rank: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationRules {
    /// Leading words removed before comparison, e.g. `["AI", "the"]`.
    #[serde(default)]
    pub strip_prefixes: Vec<String>,
}

impl NormalizationRules {
    pub fn describe(&self) -> String {
        let mut d = "trim; case-fold; collapse internal whitespace".to_string();
        if !self.strip_prefixes.is_empty() {
            d.push_str(&format!("; strip leading {}", self.strip_prefixes.join("/")));
        }
        d
    }

    pub fn normalize(&self, name: &str) -> String {
        let mut words: Vec<String> = name.split_whitespace().map(str::to_lowercase).collect();
        let prefixes: Vec<String> = self.strip_prefixes.iter().map(|p| p.trim().to_lowercase()).collect();
        while words.len() > 1 && prefixes.iter().any(|p| *p == words[0]) {
            words.remove(0);
        }
        words.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRegistry {
    pub schema_version: u32,
    pub pipeline_kind: PipelineKind,
    pub normalization: String,
    pub normalization_rules: NormalizationRules,
    pub reserved_none_class: CandidateClass,
    pub classes: Vec<CandidateClass>,
}

impl ClassRegistry {
    pub fn get(&self, class_id: &str) -> Option<&CandidateClass> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn get_mut(&mut self, class_id: &str) -> Option<&mut CandidateClass> {
        self.classes.iter_mut().find(|c| c.class_id == class_id)
    }
}

fn class_id_for(normalized: &str) -> String {
    format!("c{}", &hex::encode(Sha256::digest(normalized.as_bytes()))[..10])
}

/// Fold candidates with equal normalized names together. The result is
/// sorted by normalized name and does not depend on input order: counts and
/// id sets are unions, the longest prompt wins, and the display name comes
/// from the best-attested variant.
pub fn merge_registry(candidates: &[CandidateClass], kind: PipelineKind, rules: &NormalizationRules) -> ClassRegistry {
    let mut groups: BTreeMap<String, Vec<&CandidateClass>> = BTreeMap::new();
    for c in candidates {
        let key = rules.normalize(&c.name);
        if key.is_empty() {
            continue;
        }
        groups.entry(key).or_default().push(c);
    }
    let classes = groups
        .into_iter()
        .map(|(key, members)| {
            let mut example_unit_ids = BTreeSet::new();
            let mut source_batches = BTreeSet::new();
            let mut reported_count = 0u64;
            for m in &members {
                example_unit_ids.extend(m.example_unit_ids.iter().cloned());
                source_batches.extend(m.source_batches.iter().copied());
                reported_count += m.reported_count;
            }
            let name = members
                .iter()
                .max_by(|a, b| a.count.cmp(&b.count).then_with(|| b.name.cmp(&a.name)))
                .map(|m| m.name.split_whitespace().collect::<Vec<_>>().join(" "))
                .unwrap_or_default();
            let prompt = members
                .iter()
                .map(|m| m.prompt.trim())
                .max_by(|a, b| a.len().cmp(&b.len()).then_with(|| b.cmp(a)))
                .unwrap_or_default()
                .to_string();
            CandidateClass {
                class_id: class_id_for(&key),
                name,
                prompt,
                count: example_unit_ids.len(),
                reported_count,
                example_unit_ids,
                source_batches,
                status: ClassStatus::Proposed,
                merged_into: None,
                final_rank: None,
            }
        })
        .collect();
    let none = kind.none_class();
    let mut reserved = CandidateClass::proposed(none, kind.none_class_prompt(), 0);
    reserved.class_id = class_id_for(&rules.normalize(none));
    reserved.source_batches.clear();
    ClassRegistry {
        schema_version: REGISTRY_SCHEMA_VERSION,
        pipeline_kind: kind,
        normalization: rules.describe(),
        normalization_rules: rules.clone(),
        reserved_none_class: reserved,
        classes,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SchemaError {
    #[error("no JSON object: {0}")]
    Json(String),
    #[error("missing \"frame-categories\" array")]
    MissingCategories,
    #[error("no usable class entries")]
    NoValidEntries,
}

/// Classes parsed from one generation reply, plus what was dropped on the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedClasses {
    pub classes: Vec<CandidateClass>,
    pub warnings: Vec<String>,
}

fn field<'a>(obj: &'a Map<String, Value>, names: &[&str]) -> Option<&'a Value> {
    names.iter().find_map(|n| {
        obj.iter()
            .find(|(k, _)| k.trim().eq_ignore_ascii_case(n))
            .map(|(_, v)| v)
    })
}

fn lenient_count(v: Option<&Value>) -> Option<u64> {
    match v? {
        Value::Number(n) => n
            .as_u64()
            .or_else(|| n.as_f64().filter(|f| *f >= 0.0).map(|f| f as u64)),
        Value::String(s) => {
            let digits: String = s
                .trim()
                .chars()
                .skip_while(|c| !c.is_ascii_digit())
                .take_while(|c| c.is_ascii_digit())
                .collect();
            digits.parse().ok()
        }
        _ => None,
    }
}

fn example_ids(v: Option<&Value>) -> Vec<String> {
    let raw: Vec<String> = match v {
        Some(Value::String(s)) => s.split(',').map(str::to_string).collect(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|i| match i {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            })
            .collect(),
        _ => Vec::new(),
    };
    raw.into_iter()
        .map(|s| {
            s.trim()
                .trim_matches(|c| c == '<' || c == '>' || c == '"')
                .trim()
                .to_string()
        })
        .filter(|s| !s.is_empty())
        .collect()
}

/// Validate a generation reply against the class schema. Entries without a
/// name or prompt are dropped with a warning; entries beyond `cap` are
/// dropped with a warning; example ids outside `batch_ids` are ignored.
pub fn parse_classes(
    raw: &str,
    kind: PipelineKind,
    cap: usize,
    batch: usize,
    batch_ids: &BTreeSet<String>,
) -> Result<GeneratedClasses, SchemaError> {
    let obj = extract_json(raw).map_err(|e| SchemaError::Json(e.to_string()))?;
    let entries = match field(&obj, &["frame-categories", "topic-categories", "categories"]) {
        Some(Value::Array(a)) => a,
        _ => return Err(SchemaError::MissingCategories),
    };
    let name_keys: &[&str] = match kind {
        PipelineKind::Topics => &["topic", "frame", "name"],
        _ => &["frame", "topic", "name"],
    };
    let mut warnings = Vec::new();
    let mut classes = Vec::new();
    for (i, entry) in entries.iter().enumerate() {
        let Some(obj) = entry.as_object() else {
            warnings.push(format!("entry {i} is not an object"));
            continue;
        };
        let name = field(obj, name_keys)
            .and_then(Value::as_str)
            .map(str::trim)
            .unwrap_or("");
        let prompt = field(obj, &["prompt"])
            .and_then(Value::as_str)
            .map(str::trim)
            .unwrap_or("");
        if name.is_empty() {
            warnings.push(format!("entry {i} has no {} name; dropped", kind.class_key()));
            continue;
        }
        if prompt.is_empty() {
            warnings.push(format!("entry {i} ({name}) has no prompt; dropped"));
            continue;
        }
        let mut c = CandidateClass::proposed(name, prompt, batch);
        let count = field(obj, &["Count"]);
        c.reported_count = lenient_count(count).unwrap_or_else(|| {
            if count.is_some() {
                warnings.push(format!("entry {i} ({name}) has an unreadable Count"));
            }
            0
        });
        for id in example_ids(field(obj, &["Example IDs", "example_ids", "examples"])) {
            if batch_ids.contains(&id) {
                c.example_unit_ids.insert(id);
            } else {
                warnings.push(format!("entry {i} ({name}) cites {id:?}, which is not in the batch"));
            }
        }
        c.count = c.example_unit_ids.len();
        classes.push(c);
    }
    if classes.is_empty() {
        return Err(SchemaError::NoValidEntries);
    }
    if classes.len() > cap {
        warnings.push(format!(
            "{} classes returned, cap is {cap}; extras dropped",
            classes.len()
        ));
        classes.truncate(cap);
    }
    Ok(GeneratedClasses { classes, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub unit_ids: Vec<String>,
    pub classes: Vec<CandidateClass>,
    pub warnings: Vec<String>,
    pub attempt_count: u32,
    pub template_id: String,
}

/// One generation call over a batch. Summaries are listed one per line,
/// prefixed by their unit id.
pub fn generate_classes(
    ctx: &StageContext<'_>,
    kind: PipelineKind,
    cap: usize,
    batch_index: usize,
    summaries: &[(String, String)],
) -> Result<Result<BatchRecord, StageFailure>, StageError> {
    let listing = summaries
        .iter()
        .map(|(id, text)| format!("{id}: {}", text.split_whitespace().collect::<Vec<_>>().join(" ")))
        .collect::<Vec<_>>()
        .join("\n");
    let batch_ids: BTreeSet<String> = summaries.iter().map(|(id, _)| id.clone()).collect();
    let messages = ctx.render(Stage::Classgen, &BTreeMap::from([(Slot::Summaries, listing)]))?;
    let request = ctx.request(Stage::Classgen, &format!("batch-{batch_index:04}"), messages);
    let asked = ctx.ask(request, JSON_CORRECTION, |raw| {
        parse_classes(raw, kind, cap, batch_index, &batch_ids)
    })?;
    Ok(asked.map(|a| BatchRecord {
        batch: batch_index,
        unit_ids: summaries.iter().map(|(id, _)| id.clone()).collect(),
        classes: a.value.classes,
        warnings: a.value.warnings,
        attempt_count: a.attempts,
        template_id: ctx.template_id(Stage::Classgen),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("u{i}")).collect()
    }

    #[test]
    fn plan_130_50_02() {
        let plan = plan_batches(&ids(130), 50, 0.2, 9, 7).unwrap();
        let shape: Vec<(usize, usize)> = plan.batches.iter().map(|b| (b.carried.len(), b.fresh.len())).collect();
        assert_eq!(shape, vec![(0, 50), (10, 40), (10, 40)]);
    }

    #[test]
    fn plan_small_pool_and_exact_fit() {
        let plan = plan_batches(&ids(40), 50, 0.2, 9, 1).unwrap();
        assert_eq!(plan.batches.len(), 1);
        assert_eq!(plan.batches[0].fresh.len(), 40);
        assert!(plan_batches(&ids(100), 100, 0.2, 21, 1).unwrap().batches.len() == 1);
        assert_eq!(plan_batches(&[], 10, 0.2, 9, 1), Err(PlanError::Empty));
    }

    #[test]
    fn plan_is_seeded() {
        let a = plan_batches(&ids(300), 50, 0.2, 9, 3).unwrap();
        assert_eq!(a, plan_batches(&ids(300), 50, 0.2, 9, 3).unwrap());
        assert_ne!(a, plan_batches(&ids(300), 50, 0.2, 9, 4).unwrap());
    }

    fn named(name: &str, count: usize, batch: usize) -> CandidateClass {
        let mut c = CandidateClass::proposed(name, "p", batch);
        c.example_unit_ids = (0..count).map(|i| format!("{name}-{batch}-{i}")).collect();
        c.count = count;
        c
    }

    #[test]
    fn case_variants_merge_and_counts_sum() {
        let reg = merge_registry(
            &[named("AI Benefits", 3, 0), named("AI  benefits ", 2, 1)],
            PipelineKind::FramesSentence,
            &NormalizationRules::default(),
        );
        assert_eq!(reg.classes.len(), 1);
        assert_eq!(reg.classes[0].count, 5);
        assert_eq!(reg.classes[0].name, "AI Benefits");
        assert_eq!(reg.classes[0].source_batches, BTreeSet::from([0, 1]));
    }

    #[test]
    fn prefix_strip_only_when_configured() {
        let c = [named("AI Risks", 1, 0), named("Risks", 1, 0)];
        assert_eq!(
            merge_registry(&c, PipelineKind::FramesSentence, &NormalizationRules::default())
                .classes
                .len(),
            2
        );
        let rules = NormalizationRules {
            strip_prefixes: vec!["AI".into(), "the".into()],
        };
        assert_eq!(
            merge_registry(&c, PipelineKind::FramesSentence, &rules).classes.len(),
            1
        );
    }

    #[test]
    fn parse_reply_with_partial_validity_and_cap() {
        let batch: BTreeSet<String> = ["u1", "u2"].iter().map(|s| s.to_string()).collect();
        let reply = r#"{"frame-categories": [
            {"frame": "AI Risks", "prompt": "Does it warn?", "Count": "2", "Example IDs": "<u1, u2>"},
            {"frame": "AI Ethics", "Count": 1},
            {"frame": "AI Benefits", "prompt": "Does it praise?", "Count": 3, "Example IDs": ["u1", "u9"]}
        ]}"#;
        let got = parse_classes(reply, PipelineKind::FramesSentence, 9, 0, &batch).unwrap();
        assert_eq!(got.classes.len(), 2);
        assert_eq!(got.classes[0].count, 2);
        assert_eq!(got.classes[0].reported_count, 2);
        assert_eq!(got.classes[1].count, 1);
        assert_eq!(got.warnings.len(), 2);

        let many: Vec<String> = (0..11)
            .map(|i| format!(r#"{{"frame": "F{i}", "prompt": "p", "Count": "1", "Example IDs": ""}}"#))
            .collect();
        let reply = format!(r#"{{"frame-categories": [{}]}}"#, many.join(","));
        let got = parse_classes(&reply, PipelineKind::FramesSentence, 9, 0, &batch).unwrap();
        assert_eq!(got.classes.len(), 9);
        assert!(got.warnings.iter().any(|w| w.contains("cap is 9")));
    }

    #[test]
    fn schema_errors() {
        let b = BTreeSet::new();
        assert_eq!(
            parse_classes("{\"classes\": []}", PipelineKind::Topics, 21, 0, &b),
            Err(SchemaError::MissingCategories)
        );
        assert_eq!(
            parse_classes(
                "{\"frame-categories\": [{\"topic\": \"x\"}]}",
                PipelineKind::Topics,
                21,
                0,
                &b
            ),
            Err(SchemaError::NoValidEntries)
        );
        assert!(matches!(
            parse_classes("nope", PipelineKind::Topics, 21, 0, &b),
            Err(SchemaError::Json(_))
        ));
    }
}
