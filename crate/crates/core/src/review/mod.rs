//! Human review of the candidate registry.
//!
//! Decisions are appended to a log and the current registry is always the
//! fold of that log over the registry as generated, so any prefix of the
//! log can be replayed and audited.

pub mod api;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classgen::{CandidateClass, ClassRegistry, ClassStatus};
use crate::prompts::PipelineKind;
use crate::store::{Event, RunStore, StoreError};

pub use api::review_router;

pub const FINAL_SCHEMA_VERSION: u32 = 1;
pub const REVIEW_STAGE: &str = "review";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ReviewAction {
    Keep,
    Discard,
    Merge { target: String },
    Rename { name: String },
    EditPrompt { prompt: String },
    Finalize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub decision_id: String,
    pub actor: String,
    pub timestamp: String,
    /// A class id (or exact class name); `registry` for finalize.
    pub subject: String,
    #[serde(flatten)]
    pub action: ReviewAction,
}

/// A decision as submitted; the service fills in id, actor and time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionInput {
    #[serde(default)]
    pub actor: Option<String>,
    #[serde(default)]
    pub timestamp: Option<String>,
    #[serde(default)]
    pub subject: Option<String>,
    #[serde(flatten)]
    pub action: ReviewAction,
}

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("no candidate registry; run class generation first")]
    NoRegistry,
    #[error("registry is finalized; no further decisions are accepted")]
    Finalized,
    #[error("registry is not finalized")]
    NotFinalized,
    #[error("unknown class {0:?}")]
    UnknownSubject(String),
    #[error("class {0:?} was merged and can no longer change")]
    MergedSubject(String),
    #[error("cannot merge {subject:?} into {target:?}: merge cycle")]
    MergeCycle { subject: String, target: String },
    #[error("merge target {0:?} is neither kept nor proposed")]
    BadMergeTarget(String),
    #[error("only kept or proposed classes can be merged; {0:?} is discarded")]
    DiscardedSubject(String),
    #[error("rename collides with existing class {0:?}")]
    RenameCollision(String),
    #[error("name must not be empty")]
    EmptyName,
    #[error("prompt must not be empty")]
    EmptyPrompt,
    #[error("finalize needs at least one kept class")]
    NothingKept,
    #[error("kept class {0:?} has an empty prompt")]
    KeptWithoutPrompt(String),
    #[error("invalid decision: {0}")]
    Invalid(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl ReviewError {
    /// Refusals caused by the decision itself, as opposed to I/O.
    pub fn is_rejection(&self) -> bool {
        !matches!(self, ReviewError::Store(_) | ReviewError::NoRegistry)
    }
}

/// The registry with every decision so far applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewState {
    pub registry: ClassRegistry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finalized_at: Option<String>,
}

impl ReviewState {
    pub fn new(registry: ClassRegistry) -> Self {
        Self {
            registry,
            finalized_at: None,
        }
    }

    fn resolve(&self, subject: &str) -> Result<usize, ReviewError> {
        let classes = &self.registry.classes;
        if let Some(i) = classes.iter().position(|c| c.class_id == subject) {
            return Ok(i);
        }
        let rules = &self.registry.normalization_rules;
        let key = rules.normalize(subject);
        classes
            .iter()
            .position(|c| c.status != ClassStatus::Merged && rules.normalize(&c.name) == key)
            .ok_or_else(|| ReviewError::UnknownSubject(subject.to_string()))
    }

    /// Apply one decision, or leave the state untouched and say why not.
    pub fn apply(&mut self, d: &ReviewDecision) -> Result<(), ReviewError> {
        if self.finalized_at.is_some() {
            return Err(ReviewError::Finalized);
        }
        if d.action == ReviewAction::Finalize {
            return self.finalize(&d.timestamp);
        }
        let i = self.resolve(&d.subject)?;
        let subject = self.registry.classes[i].clone();
        if subject.status == ClassStatus::Merged {
            return Err(ReviewError::MergedSubject(subject.name));
        }
        let classes = &mut self.registry.classes;
        match &d.action {
            ReviewAction::Keep => classes[i].status = ClassStatus::Kept,
            ReviewAction::Discard => classes[i].status = ClassStatus::Discarded,
            ReviewAction::Merge { target } => {
                let t = self.resolve(target)?;
                let classes = &mut self.registry.classes;
                if t == i || classes[t].merged_into.as_deref() == Some(subject.class_id.as_str()) {
                    return Err(ReviewError::MergeCycle {
                        subject: subject.name,
                        target: classes[t].name.clone(),
                    });
                }
                if !matches!(classes[t].status, ClassStatus::Kept | ClassStatus::Proposed) {
                    return Err(ReviewError::BadMergeTarget(classes[t].name.clone()));
                }
                if subject.status == ClassStatus::Discarded {
                    return Err(ReviewError::DiscardedSubject(subject.name));
                }
                let target = &mut classes[t];
                target.count += subject.count;
                target.reported_count += subject.reported_count;
                target.example_unit_ids.extend(subject.example_unit_ids.iter().cloned());
                target.source_batches.extend(subject.source_batches.iter().copied());
                let target_id = target.class_id.clone();
                classes[i].status = ClassStatus::Merged;
                classes[i].merged_into = Some(target_id);
            }
            ReviewAction::Rename { name } => {
                let name = name.split_whitespace().collect::<Vec<_>>().join(" ");
                if name.is_empty() {
                    return Err(ReviewError::EmptyName);
                }
                let rules = &self.registry.normalization_rules;
                let key = rules.normalize(&name);
                if let Some(other) = classes
                    .iter()
                    .enumerate()
                    .find(|(j, c)| *j != i && c.status != ClassStatus::Merged && rules.normalize(&c.name) == key)
                {
                    return Err(ReviewError::RenameCollision(other.1.name.clone()));
                }
                classes[i].name = name;
            }
            ReviewAction::EditPrompt { prompt } => {
                if prompt.trim().is_empty() {
                    return Err(ReviewError::EmptyPrompt);
                }
                classes[i].prompt = prompt.trim().to_string();
            }
            ReviewAction::Finalize => unreachable!("handled above"),
        }
        Ok(())
    }

    fn finalize(&mut self, timestamp: &str) -> Result<(), ReviewError> {
        let mut kept: Vec<usize> = (0..self.registry.classes.len())
            .filter(|&i| self.registry.classes[i].status == ClassStatus::Kept)
            .collect();
        if kept.is_empty() {
            return Err(ReviewError::NothingKept);
        }
        if let Some(&i) = kept
            .iter()
            .find(|&&i| self.registry.classes[i].prompt.trim().is_empty())
        {
            return Err(ReviewError::KeptWithoutPrompt(self.registry.classes[i].name.clone()));
        }
        let classes = &mut self.registry.classes;
        kept.sort_by(|&a, &b| {
            classes[b]
                .count
                .cmp(&classes[a].count)
                .then_with(|| classes[a].name.cmp(&classes[b].name))
        });
        for (rank, &i) in kept.iter().enumerate() {
            classes[i].final_rank = Some(rank + 1);
        }
        self.finalized_at = Some(timestamp.to_string());
        Ok(())
    }
}

/// Fold a decision log over the generated registry. Fails on the first
/// decision that does not apply, reporting its index.
pub fn fold(original: &ClassRegistry, decisions: &[ReviewDecision]) -> Result<ReviewState, (usize, ReviewError)> {
    let mut state = ReviewState::new(original.clone());
    for (i, d) in decisions.iter().enumerate() {
        state.apply(d).map_err(|e| (i, e))?;
    }
    Ok(state)
}

/// sha256 over the generated registry and the decision log, so identical
/// logs over identical registries hash identically.
pub fn registry_hash(original: &ClassRegistry, decisions: &[ReviewDecision]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(original).expect("registry serializes"));
    for d in decisions {
        h.update(b"\n");
        h.update(serde_json::to_string(d).expect("decision serializes"));
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalClass {
    pub class_id: String,
    pub name: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalClassSet {
    pub schema_version: u32,
    pub pipeline_kind: PipelineKind,
    /// Kept classes by rank, then the reserved class if it was not kept.
    pub classes: Vec<FinalClass>,
    pub none_class: String,
    pub includes_none_class: bool,
    pub finalized_at: String,
    pub registry_hash: String,
}

impl FinalClassSet {
    pub fn is_none_class(&self, name: &str) -> bool {
        name.trim().eq_ignore_ascii_case(self.none_class.trim())
    }

    /// Classes that get a Likert rating for every unit.
    pub fn rated(&self) -> Vec<&FinalClass> {
        self.classes
            .iter()
            .filter(|c| self.pipeline_kind.rates_none_class() || !self.is_none_class(&c.name))
            .collect()
    }

    pub fn names(&self) -> BTreeSet<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }
}

/// Build the final set from a finalized state.
pub fn export_final(
    state: &ReviewState,
    original: &ClassRegistry,
    decisions: &[ReviewDecision],
) -> Result<FinalClassSet, ReviewError> {
    let finalized_at = state.finalized_at.clone().ok_or(ReviewError::NotFinalized)?;
    let mut kept: Vec<&CandidateClass> = state
        .registry
        .classes
        .iter()
        .filter(|c| c.status == ClassStatus::Kept)
        .collect();
    kept.sort_by_key(|c| c.final_rank);
    let mut classes: Vec<FinalClass> = kept
        .iter()
        .map(|c| FinalClass {
            class_id: c.class_id.clone(),
            name: c.name.clone(),
            prompt: c.prompt.clone(),
        })
        .collect();
    let none = &state.registry.reserved_none_class;
    let rules = &state.registry.normalization_rules;
    if !classes
        .iter()
        .any(|c| rules.normalize(&c.name) == rules.normalize(&none.name))
    {
        classes.push(FinalClass {
            class_id: none.class_id.clone(),
            name: none.name.clone(),
            prompt: none.prompt.clone(),
        });
    }
    Ok(FinalClassSet {
        schema_version: FINAL_SCHEMA_VERSION,
        pipeline_kind: state.registry.pipeline_kind,
        classes,
        none_class: none.name.clone(),
        includes_none_class: true,
        finalized_at,
        registry_hash: registry_hash(original, decisions),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSort {
    #[default]
    CountDesc,
    Name,
    Batch,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateQuery {
    /// Empty means every status.
    #[serde(default)]
    pub status: Vec<ClassStatus>,
    #[serde(default)]
    pub sort: CandidateSort,
    /// Example texts per row.
    #[serde(default)]
    pub examples: Option<usize>,
    #[serde(default)]
    pub offset: usize,
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleUnit {
    pub unit_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    #[serde(flatten)]
    pub class: CandidateClass,
    pub examples: Vec<ExampleUnit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePage {
    pub total: usize,
    pub offset: usize,
    pub rows: Vec<CandidateRow>,
    pub warnings: Vec<String>,
}

pub const DEFAULT_EXAMPLES: usize = 3;

pub fn list_candidates(state: &ReviewState, units: &BTreeMap<String, String>, query: &CandidateQuery) -> CandidatePage {
    let mut matching: Vec<&CandidateClass> = state
        .registry
        .classes
        .iter()
        .filter(|c| query.status.is_empty() || query.status.contains(&c.status))
        .collect();
    match query.sort {
        CandidateSort::CountDesc => matching.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.name.cmp(&b.name))),
        CandidateSort::Name => matching.sort_by(|a, b| {
            a.name
                .to_lowercase()
                .cmp(&b.name.to_lowercase())
                .then_with(|| a.name.cmp(&b.name))
        }),
        CandidateSort::Batch => matching.sort_by(|a, b| {
            a.source_batches
                .first()
                .cmp(&b.source_batches.first())
                .then_with(|| a.name.cmp(&b.name))
        }),
    }
    let total = matching.len();
    let k = query.examples.unwrap_or(DEFAULT_EXAMPLES);
    let mut warnings = Vec::new();
    let rows = matching
        .into_iter()
        .skip(query.offset)
        .take(query.limit.unwrap_or(usize::MAX))
        .map(|c| {
            let mut examples = Vec::new();
            for id in c.example_unit_ids.iter().take(k) {
                match units.get(id) {
                    Some(text) => examples.push(ExampleUnit {
                        unit_id: id.clone(),
                        text: text.clone(),
                    }),
                    None => warnings.push(format!("class {:?}: example unit {id:?} not found in corpus", c.name)),
                }
            }
            CandidateRow {
                class: c.clone(),
                examples,
            }
        })
        .collect();
    CandidatePage {
        total,
        offset: query.offset,
        rows,
        warnings,
    }
}

/// The review step over one run: the generated registry, the decision log
/// and the unit texts that examples are resolved against.
pub struct ReviewService {
    original: ClassRegistry,
    decisions: Vec<ReviewDecision>,
    state: ReviewState,
    units: BTreeMap<String, String>,
    store: Option<Arc<RunStore>>,
}

impl ReviewService {
    /// Start from `original`, replaying any decisions already in `store`.
    pub fn open(
        original: ClassRegistry,
        units: BTreeMap<String, String>,
        store: Option<Arc<RunStore>>,
    ) -> Result<Self, ReviewError> {
        let decisions = match &store {
            Some(s) => load_decisions(s)?,
            None => Vec::new(),
        };
        let state =
            fold(&original, &decisions).map_err(|(i, e)| ReviewError::Invalid(format!("stored decision {i}: {e}")))?;
        Ok(Self {
            original,
            decisions,
            state,
            units,
            store,
        })
    }

    pub fn state(&self) -> &ReviewState {
        &self.state
    }

    pub fn original(&self) -> &ClassRegistry {
        &self.original
    }

    pub fn decisions(&self) -> &[ReviewDecision] {
        &self.decisions
    }

    pub fn is_finalized(&self) -> bool {
        self.state.finalized_at.is_some()
    }

    pub fn registry_hash(&self) -> String {
        registry_hash(&self.original, &self.decisions)
    }

    pub fn list_candidates(&self, query: &CandidateQuery) -> CandidatePage {
        list_candidates(&self.state, &self.units, query)
    }

    /// Validate and append one decision. Refusals are logged to the run
    /// store as rejected events and returned.
    pub fn apply_decision(&mut self, input: DecisionInput) -> Result<&ReviewState, ReviewError> {
        let decision = ReviewDecision {
            decision_id: format!("d{:04}", self.decisions.len() + 1),
            actor: input.actor.unwrap_or_else(|| "reviewer".into()),
            timestamp: input
                .timestamp
                .unwrap_or_else(|| Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)),
            subject: match (&input.action, input.subject) {
                (ReviewAction::Finalize, s) => s.unwrap_or_else(|| "registry".into()),
                (_, Some(s)) => s,
                (_, None) => {
                    return Err(self.reject(ReviewError::Invalid("decision has no subject".into()), &input.action))
                }
            },
            action: input.action,
        };
        let mut next = self.state.clone();
        if let Err(e) = next.apply(&decision) {
            return Err(self.reject_decision(e, &decision));
        }
        if let Some(store) = &self.store {
            store.append(Event::Decision {
                data: serde_json::to_value(&decision).expect("decision serializes"),
            })?;
        }
        self.decisions.push(decision);
        self.state = next;
        Ok(&self.state)
    }

    fn reject(&self, e: ReviewError, action: &ReviewAction) -> ReviewError {
        self.log_rejection(&e, serde_json::to_value(action).expect("action serializes"))
            .unwrap_or(e)
    }

    fn reject_decision(&self, e: ReviewError, d: &ReviewDecision) -> ReviewError {
        self.log_rejection(&e, serde_json::to_value(d).expect("decision serializes"))
            .unwrap_or(e)
    }

    /// Returns a store error in place of `e` if logging itself failed.
    fn log_rejection(&self, e: &ReviewError, data: serde_json::Value) -> Option<ReviewError> {
        let store = self.store.as_ref()?;
        store
            .append(Event::Rejected {
                stage: REVIEW_STAGE.into(),
                reason: e.to_string(),
                data,
            })
            .err()
            .map(ReviewError::Store)
    }

    pub fn export_final(&self) -> Result<FinalClassSet, ReviewError> {
        export_final(&self.state, &self.original, &self.decisions)
    }
}

/// Accepted decisions from the run log, in order.
pub fn load_decisions(store: &RunStore) -> Result<Vec<ReviewDecision>, ReviewError> {
    let mut out = Vec::new();
    for env in store.events()? {
        if let Event::Decision { data } = env.event {
            out.push(serde_json::from_value(data).map_err(|e| ReviewError::Invalid(e.to_string()))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classgen::{merge_registry, NormalizationRules};

    fn registry(names: &[(&str, usize)]) -> ClassRegistry {
        let cands: Vec<CandidateClass> = names
            .iter()
            .map(|(n, count)| {
                let mut c = CandidateClass::proposed(n, &format!("Is it about {n}?"), 0);
                c.example_unit_ids = (0..*count).map(|i| format!("{n}#{i}")).collect();
                c.count = *count;
                c
            })
            .collect();
        merge_registry(&cands, PipelineKind::FramesSentence, &NormalizationRules::default())
    }

    fn input(subject: &str, action: ReviewAction) -> DecisionInput {
        DecisionInput {
            actor: Some("t".into()),
            timestamp: Some("2024-05-01T00:00:00Z".into()),
            subject: Some(subject.into()),
            action,
        }
    }

    fn service() -> ReviewService {
        ReviewService::open(
            registry(&[("AI Benefits", 4), ("AI Potential", 2), ("AI Risks", 3)]),
            BTreeMap::new(),
            None,
        )
        .unwrap()
    }

    fn class<'a>(s: &'a ReviewService, name: &str) -> &'a CandidateClass {
        s.state().registry.classes.iter().find(|c| c.name == name).unwrap()
    }

    #[test]
    fn merge_adds_counts() {
        let mut s = service();
        s.apply_decision(input(
            "AI Potential",
            ReviewAction::Merge {
                target: "AI Benefits".into(),
            },
        ))
        .unwrap();
        assert_eq!(class(&s, "AI Benefits").count, 6);
        let p = class(&s, "AI Potential");
        assert_eq!(p.status, ClassStatus::Merged);
        assert_eq!(
            p.merged_into.as_deref(),
            Some(class(&s, "AI Benefits").class_id.as_str())
        );
        // a merged class is gone for good
        assert!(s
            .apply_decision(input(
                "AI Benefits",
                ReviewAction::Merge {
                    target: "AI Potential".into()
                }
            ))
            .is_err());
    }

    #[test]
    fn rename_collision_is_rejected() {
        let mut s = service();
        s.apply_decision(input("AI Benefits", ReviewAction::Keep)).unwrap();
        s.apply_decision(input("AI Risks", ReviewAction::Keep)).unwrap();
        let err = s
            .apply_decision(input(
                "AI Risks",
                ReviewAction::Rename {
                    name: "ai  benefits".into(),
                },
            ))
            .unwrap_err();
        assert!(matches!(err, ReviewError::RenameCollision(_)));
        s.apply_decision(input(
            "AI Risks",
            ReviewAction::Rename {
                name: "AI Dangers".into(),
            },
        ))
        .unwrap();
        assert_eq!(class(&s, "AI Dangers").count, 3);
    }

    #[test]
    fn finalize_freezes_and_exports() {
        let mut s = service();
        assert!(matches!(
            s.apply_decision(input("registry", ReviewAction::Finalize)),
            Err(ReviewError::NothingKept)
        ));
        s.apply_decision(input("AI Risks", ReviewAction::Keep)).unwrap();
        s.apply_decision(input("AI Benefits", ReviewAction::Keep)).unwrap();
        s.apply_decision(input("registry", ReviewAction::Finalize)).unwrap();
        assert!(matches!(
            s.apply_decision(input("AI Potential", ReviewAction::Keep)),
            Err(ReviewError::Finalized)
        ));
        let f = s.export_final().unwrap();
        let names: Vec<&str> = f.classes.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, vec!["AI Benefits", "AI Risks", "No Frame"]);
        assert_eq!(f.rated().len(), 2);
        assert_eq!(f.finalized_at, "2024-05-01T00:00:00Z");
        // replaying the same log gives the same set
        let again = fold(s.original(), s.decisions()).unwrap();
        assert_eq!(export_final(&again, s.original(), s.decisions()).unwrap(), f);
    }

    #[test]
    fn kept_none_class_is_not_duplicated() {
        let mut s = ReviewService::open(registry(&[("No Frame", 1), ("AI Risks", 1)]), BTreeMap::new(), None).unwrap();
        s.apply_decision(input("No Frame", ReviewAction::Keep)).unwrap();
        s.apply_decision(input("AI Risks", ReviewAction::Keep)).unwrap();
        s.apply_decision(input("registry", ReviewAction::Finalize)).unwrap();
        let f = s.export_final().unwrap();
        assert_eq!(f.classes.len(), 2);
        assert_eq!(f.rated().len(), 1);
    }

    #[test]
    fn listing_filters_sorts_and_warns() {
        let s = service();
        let page = s.list_candidates(&CandidateQuery {
            status: vec![ClassStatus::Proposed],
            ..Default::default()
        });
        let counts: Vec<usize> = page.rows.iter().map(|r| r.class.count).collect();
        assert_eq!(counts, vec![4, 3, 2]);
        assert_eq!(page.warnings.len(), 8);
        let kept = s.list_candidates(&CandidateQuery {
            status: vec![ClassStatus::Kept],
            ..Default::default()
        });
        assert!(kept.rows.is_empty());
    }

    #[test]
    fn missing_example_is_a_warning() {
        let reg = registry(&[("AI Risks", 3)]);
        let ids: Vec<String> = reg.classes[0].example_unit_ids.iter().cloned().collect();
        let units = BTreeMap::from([(ids[0].clone(), "a".to_string()), (ids[1].clone(), "b".to_string())]);
        let s = ReviewService::open(reg, units, None).unwrap();
        let page = s.list_candidates(&CandidateQuery::default());
        assert_eq!(page.rows[0].examples.len(), 2);
        assert_eq!(page.warnings.len(), 1);
    }

    #[test]
    fn decisions_persist_and_rejections_are_logged() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(RunStore::open(dir.path(), "h").unwrap());
        let reg = registry(&[("AI Risks", 1)]);
        {
            let mut s = ReviewService::open(reg.clone(), BTreeMap::new(), Some(store.clone())).unwrap();
            s.apply_decision(input("AI Risks", ReviewAction::Keep)).unwrap();
            s.apply_decision(input("registry", ReviewAction::Finalize)).unwrap();
            assert!(s.apply_decision(input("AI Risks", ReviewAction::Discard)).is_err());
        }
        let s = ReviewService::open(reg, BTreeMap::new(), Some(store.clone())).unwrap();
        assert!(s.is_finalized());
        let rejected = store
            .events()
            .unwrap()
            .into_iter()
            .filter(|e| matches!(e.event, Event::Rejected { .. }))
            .count();
        assert_eq!(rejected, 1);
    }
}
