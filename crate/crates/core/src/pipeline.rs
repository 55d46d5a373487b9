//! Stage orchestration over a run directory.
//!
//! Every stage stores one record per unit (or batch) in the run store as
//! soon as it is done, skips keys that already have a record, and marks
//! itself complete at the end. A killed run therefore resumes where it
//! stopped. Derived files are rebuilt from the records alone, in unit order,
//! so two runs over the same inputs produce the same bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::info;

use crate::classgen::{
    generate_classes, merge_registry, plan_batches, BatchPlan, BatchRecord, ClassRegistry, PlanError,
};
use crate::classify::{
    build_profile, final_select, none_result, rate_fit, run_means, ClassificationResult, FitProfile,
};
use crate::config::{ConfigError, EndpointConfig, RunConfig};
use crate::corpus::{ingest, segment, token_guard, CorpusError, CorpusUnit, Document, SentenceSplitter, TokenGuard};
use crate::detect::{detect, DetectLabel, DetectionRecord};
use crate::gateway::{
    Backend, CompletionParams, Gateway, HttpBackend, HttpBackendConfig, MockBackend, MockFixture, Stage,
};
use crate::metrics::{evaluate, read_gold, score, EvalReport, LabelSet, Matching, MetricsError, Task};
use crate::prompts::{PromptError, TemplateSet};
use crate::review::{DecisionInput, FinalClassSet, ReviewError, ReviewService};
use crate::stage::{Outcome, StageContext, StageError, StageFailure};
use crate::store::{RunStore, StoreError};
use crate::summarize::{summarize_unit, SummaryKind, SummaryRecord};

pub const SCHEMA_VERSION: u32 = 1;

/// Record namespaces in the run store.
pub mod records {
    pub const INGEST: &str = "ingest";
    pub const SEGMENT: &str = "segment";
    pub const DETECT: &str = "detect";
    pub const SUMMARIZE: &str = "summarize";
    pub const PLAN: &str = "classgen_plan";
    pub const CLASSGEN: &str = "classgen";
    pub const LONG_SUMMARY: &str = "classify_summarize";
    pub const FIT: &str = "classify_fit";
    pub const CLASSIFY: &str = "classify";
    pub const EVAL: &str = "eval";
}
use records::*;

/// Names of the derived files in a run directory.
pub mod files {
    pub const DOCUMENTS: &str = "documents.jsonl";
    pub const UNITS: &str = "units.jsonl";
    pub const EXCLUDED: &str = "excluded_units.jsonl";
    pub const DETECTION: &str = "detection.jsonl";
    pub const SUMMARIES: &str = "summaries.jsonl";
    pub const BATCHES: &str = "batches.json";
    pub const GENERATION: &str = "generation.jsonl";
    pub const REGISTRY: &str = "registry.json";
    pub const REVIEW: &str = "review.json";
    pub const FINAL: &str = "final_classes.json";
    pub const PROFILES: &str = "fit_profiles.jsonl";
    pub const RESULTS: &str = "results.jsonl";
    pub const METRICS: &str = "metrics.json";
    pub const METRICS_TABLE: &str = "metrics.txt";
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("batch plan: {0}")]
    Plan(#[from] PlanError),
    #[error("backend: {0}")]
    Backend(String),
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("stored {stage} record {key:?} is unreadable: {reason}")]
    BadRecord { stage: String, key: String, reason: String },
    #[error("{0}")]
    Missing(String),
}

/// A unit as segmented, with its token-guard verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEntry {
    #[serde(flatten)]
    pub unit: CorpusUnit,
    pub estimated_tokens: usize,
    pub guard: TokenGuard,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub total: usize,
    /// Records found from an earlier (interrupted) run.
    pub reused: usize,
    pub new: usize,
    pub failed: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub struct Pipeline {
    config: RunConfig,
    templates: TemplateSet,
    store: Arc<RunStore>,
    gateway: Gateway,
    params: BTreeMap<Stage, CompletionParams>,
    pool: rayon::ThreadPool,
    config_hash: String,
    dir: PathBuf,
}

fn backend_for(config: &RunConfig) -> Result<Arc<dyn Backend>, PipelineError> {
    Ok(match &config.endpoint {
        EndpointConfig::Mock { fixture, .. } => {
            let f = MockFixture::load(fixture).map_err(PipelineError::Backend)?;
            Arc::new(MockBackend::new(f).map_err(PipelineError::Backend)?)
        }
        EndpointConfig::Http {
            base_url,
            model,
            timeout_secs,
            ..
        } => Arc::new(
            HttpBackend::new(HttpBackendConfig {
                base_url: base_url.clone(),
                model: model.clone(),
                api_key: config.api_key(),
                timeout_secs: *timeout_secs,
            })
            .map_err(PipelineError::Backend)?,
        ),
    })
}

impl Pipeline {
    pub fn open(config: RunConfig, dir: &Path) -> Result<Self, PipelineError> {
        let backend = backend_for(&config)?;
        Self::with_backend(config, dir, backend)
    }

    /// Open with a caller-supplied backend instead of the configured one.
    pub fn with_backend(config: RunConfig, dir: &Path, backend: Arc<dyn Backend>) -> Result<Self, PipelineError> {
        let templates = TemplateSet::load(config.pipeline_kind, config.templates_dir.as_deref())?;
        let config_hash = config.config_hash(&templates)?;
        let store = Arc::new(RunStore::open(dir, &config_hash)?);
        let gateway = Gateway::new(backend, config.retry, config.max_in_flight()).with_store(store.clone());
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| PipelineError::Backend(e.to_string()))?;
        Ok(Self {
            params: config.stage_params(),
            config,
            templates,
            store,
            gateway,
            pool,
            config_hash,
            dir: dir.to_path_buf(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn store(&self) -> &Arc<RunStore> {
        &self.store
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn ctx(&self) -> StageContext<'_> {
        StageContext {
            gateway: &self.gateway,
            templates: &self.templates,
            params: &self.params,
            reask_cap: self.config.reask_cap,
        }
    }

    fn typed<T: DeserializeOwned>(&self, stage: &str) -> Result<BTreeMap<String, T>, PipelineError> {
        self.store
            .records(stage)
            .into_iter()
            .map(|(k, v)| {
                serde_json::from_value(v)
                    .map(|t| (k.clone(), t))
                    .map_err(|e| PipelineError::BadRecord {
                        stage: stage.into(),
                        key: k,
                        reason: e.to_string(),
                    })
            })
            .collect()
    }

    /// Run `f` over every unit that has no `stage` record yet, in parallel,
    /// storing each result as it arrives.
    fn run_units<T, F>(
        &self,
        stage: &str,
        units: &[&CorpusUnit],
        failed: impl Fn(&T) -> bool + Sync,
        f: F,
    ) -> Result<StageReport, PipelineError>
    where
        T: Serialize + DeserializeOwned + Send,
        F: Fn(&CorpusUnit) -> Result<T, PipelineError> + Sync,
    {
        let existing = self.store.records(stage);
        let todo: Vec<&CorpusUnit> = units
            .iter()
            .copied()
            .filter(|u| !existing.contains_key(&u.unit_id))
            .collect();
        let reused = units.len() - todo.len();
        info!(stage, total = units.len(), reused, "stage start");
        self.pool.install(|| {
            todo.par_iter().try_for_each(|u| {
                let rec = f(u)?;
                self.store.put_record(stage, &u.unit_id, &rec)?;
                Ok::<_, PipelineError>(())
            })
        })?;
        let mut report = StageReport {
            stage: stage.into(),
            total: units.len(),
            reused,
            new: todo.len(),
            failed: 0,
            notes: Vec::new(),
        };
        for u in units {
            if let Some(v) = self.store.record(stage, &u.unit_id) {
                if serde_json::from_value::<T>(v).map(|t| failed(&t)).unwrap_or(true) {
                    report.failed += 1;
                }
            }
        }
        Ok(report)
    }

    fn finish(&self, stage: &str, report: StageReport) -> Result<StageReport, PipelineError> {
        if !self.store.is_complete(stage) {
            self.store.mark_complete(stage, report.total)?;
        }
        self.write_derived()?;
        Ok(report)
    }

    pub fn ingest(&self) -> Result<StageReport, PipelineError> {
        if self.store.is_complete(INGEST) {
            let n = self.store.records(INGEST).len();
            return Ok(StageReport {
                stage: INGEST.into(),
                total: n,
                reused: n,
                ..Default::default()
            });
        }
        let report = ingest(&self.config.corpus.path, self.config.corpus.format)?;
        let existing = self.store.records(INGEST);
        let mut new = 0;
        for (i, doc) in report.documents.iter().enumerate() {
            let key = format!("{i:08}");
            if !existing.contains_key(&key) {
                self.store.put_record(INGEST, &key, doc)?;
                new += 1;
            }
        }
        let total = report.documents.len();
        self.finish(
            INGEST,
            StageReport {
                stage: INGEST.into(),
                total,
                reused: total - new,
                new,
                failed: report.warnings.len(),
                notes: report.warnings,
            },
        )
    }

    pub fn documents(&self) -> Result<Vec<Document>, PipelineError> {
        Ok(self.typed::<Document>(INGEST)?.into_values().collect())
    }

    pub fn segment(&self) -> Result<StageReport, PipelineError> {
        self.ingest()?;
        if self.store.is_complete(SEGMENT) {
            let n = self.store.records(SEGMENT).len();
            return Ok(StageReport {
                stage: SEGMENT.into(),
                total: n,
                reused: n,
                ..Default::default()
            });
        }
        let splitter = match &self.config.corpus.abbreviations {
            Some(p) => SentenceSplitter::from_list(&fs::read_to_string(p).map_err(|source| PipelineError::Io {
                path: p.display().to_string(),
                source,
            })?),
            None => SentenceSplitter::default(),
        };
        let estimator = self.config.token_estimator();
        let existing = self.store.records(SEGMENT);
        let (mut index, mut new, mut over) = (0usize, 0usize, 0usize);
        for doc in self.documents()? {
            for unit in segment(&doc, self.config.granularity(), &splitter) {
                let key = format!("{index:08}");
                index += 1;
                let guard = token_guard(&unit, self.config.token_limit, &estimator);
                over += (guard == TokenGuard::OverLimit) as usize;
                if existing.contains_key(&key) {
                    continue;
                }
                let entry = UnitEntry {
                    estimated_tokens: estimator.estimate(&unit.text),
                    guard,
                    unit,
                };
                self.store.put_record(SEGMENT, &key, &entry)?;
                new += 1;
            }
        }
        let mut notes = Vec::new();
        if over > 0 {
            notes.push(format!(
                "{over} units over the {}-token limit excluded",
                self.config.token_limit
            ));
        }
        self.finish(
            SEGMENT,
            StageReport {
                stage: SEGMENT.into(),
                total: index,
                reused: index - new,
                new,
                failed: over,
                notes,
            },
        )
    }

    /// All units in corpus order, with their guard verdicts.
    pub fn unit_entries(&self) -> Result<Vec<UnitEntry>, PipelineError> {
        Ok(self.typed::<UnitEntry>(SEGMENT)?.into_values().collect())
    }

    /// Units within the token limit, in corpus order.
    pub fn units(&self) -> Result<Vec<CorpusUnit>, PipelineError> {
        Ok(self
            .unit_entries()?
            .into_iter()
            .filter(|e| e.guard == TokenGuard::Ok)
            .map(|e| e.unit)
            .collect())
    }

    pub fn detect(&self) -> Result<StageReport, PipelineError> {
        self.segment()?;
        if !self.config.pipeline_kind.has_detection() {
            return Ok(StageReport {
                stage: DETECT.into(),
                notes: vec![format!("{} has no detection stage", self.config.pipeline_kind)],
                ..Default::default()
            });
        }
        let units = self.units()?;
        let refs: Vec<&CorpusUnit> = units.iter().collect();
        let ctx = self.ctx();
        let report = self.run_units(
            DETECT,
            &refs,
            |r: &DetectionRecord| r.label == DetectLabel::Failed,
            |u| Ok(detect(&ctx, u)?),
        )?;
        self.finish(DETECT, report)
    }

    pub fn detections(&self) -> Result<BTreeMap<String, DetectionRecord>, PipelineError> {
        self.typed(DETECT)
    }

    /// Units that go on to summaries and classification: detection yes for
    /// frames, everything for topics.
    fn construct_units(&self) -> Result<Vec<CorpusUnit>, PipelineError> {
        let units = self.units()?;
        if !self.config.pipeline_kind.has_detection() {
            return Ok(units);
        }
        let det = self.detections()?;
        Ok(units
            .into_iter()
            .filter(|u| det.get(&u.unit_id).map(|d| d.label) == Some(DetectLabel::Yes))
            .collect())
    }

    pub fn summarize(&self) -> Result<StageReport, PipelineError> {
        self.detect()?;
        let units = self.construct_units()?;
        let refs: Vec<&CorpusUnit> = units.iter().collect();
        let ctx = self.ctx();
        let spec = self.config.short_summary_spec();
        let report = self.run_units(
            SUMMARIZE,
            &refs,
            |o: &Outcome<SummaryRecord>| o.ok().is_none(),
            |u| {
                Ok(Outcome::from(summarize_unit(
                    &ctx,
                    u,
                    SummaryKind::ShortForGeneration,
                    spec,
                )?))
            },
        )?;
        self.finish(SUMMARIZE, report)
    }

    pub fn genclasses(&self) -> Result<StageReport, PipelineError> {
        self.summarize()?;
        let summaries: BTreeMap<String, Outcome<SummaryRecord>> = self.typed(SUMMARIZE)?;
        let ordered: Vec<(String, String)> = self
            .units()?
            .into_iter()
            .filter_map(|u| match summaries.get(&u.unit_id) {
                Some(Outcome::Ok(s)) => Some((u.unit_id, s.text.clone())),
                _ => None,
            })
            .collect();
        let plan: BatchPlan = match self.store.record(PLAN, "plan") {
            Some(v) => serde_json::from_value(v).map_err(|e| PipelineError::BadRecord {
                stage: PLAN.into(),
                key: "plan".into(),
                reason: e.to_string(),
            })?,
            None => {
                let ids: Vec<String> = ordered.iter().map(|(id, _)| id.clone()).collect();
                let plan = plan_batches(
                    &ids,
                    self.config.batch_size(),
                    self.config.carryover(),
                    self.config.class_cap(),
                    self.config.seed,
                )?;
                self.store.put_record(PLAN, "plan", &plan)?;
                plan
            }
        };
        let texts: BTreeMap<&str, &str> = ordered.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let ctx = self.ctx();
        let mut report = StageReport {
            stage: CLASSGEN.into(),
            total: plan.batches.len(),
            ..Default::default()
        };
        // batches run in order: each one's carried ids come from the one before
        for (i, batch) in plan.batches.iter().enumerate() {
            let key = format!("batch-{i:04}");
            let outcome: Outcome<BatchRecord> = match self.store.record(CLASSGEN, &key) {
                Some(v) => {
                    report.reused += 1;
                    serde_json::from_value(v).map_err(|e| PipelineError::BadRecord {
                        stage: CLASSGEN.into(),
                        key: key.clone(),
                        reason: e.to_string(),
                    })?
                }
                None => {
                    report.new += 1;
                    let items: Vec<(String, String)> = batch
                        .ids()
                        .map(|id| {
                            (
                                id.clone(),
                                texts.get(id.as_str()).copied().unwrap_or_default().to_string(),
                            )
                        })
                        .collect();
                    let o = Outcome::from(generate_classes(
                        &ctx,
                        self.config.pipeline_kind,
                        plan.classes_per_call_cap,
                        i,
                        &items,
                    )?);
                    self.store.put_record(CLASSGEN, &key, &o)?;
                    o
                }
            };
            match outcome {
                Outcome::Ok(r) => report
                    .notes
                    .extend(r.warnings.iter().map(|w| format!("batch {i}: {w}"))),
                Outcome::Failed(f) => {
                    report.failed += 1;
                    report.notes.push(format!("batch {i} failed: {}", f.reason));
                }
            }
        }
        self.finish(CLASSGEN, report)
    }

    /// The merged candidate registry, once class generation has produced anything.
    pub fn registry(&self) -> Result<Option<ClassRegistry>, PipelineError> {
        let batches: BTreeMap<String, Outcome<BatchRecord>> = self.typed(CLASSGEN)?;
        if batches.is_empty() {
            return Ok(None);
        }
        let candidates: Vec<_> = batches
            .values()
            .filter_map(Outcome::ok)
            .flat_map(|b| b.classes.iter().cloned())
            .collect();
        Ok(Some(merge_registry(
            &candidates,
            self.config.pipeline_kind,
            &self.config.normalization,
        )))
    }

    pub fn review_service(&self) -> Result<ReviewService, PipelineError> {
        let registry = self.registry()?.ok_or(ReviewError::NoRegistry)?;
        let units = self.units()?.into_iter().map(|u| (u.unit_id, u.text)).collect();
        Ok(ReviewService::open(registry, units, Some(self.store.clone()))?)
    }

    /// Apply scripted decisions in order, stopping at the first refusal.
    pub fn apply_decisions(&self, inputs: Vec<DecisionInput>) -> Result<usize, PipelineError> {
        let mut svc = self.review_service()?;
        let n = inputs.len();
        let result = inputs.into_iter().try_for_each(|d| svc.apply_decision(d).map(|_| ()));
        self.write_derived()?;
        result?;
        Ok(n)
    }

    pub fn final_set(&self) -> Result<FinalClassSet, PipelineError> {
        Ok(self.review_service()?.export_final()?)
    }

    pub fn classify(&self) -> Result<Vec<StageReport>, PipelineError> {
        let final_set = self.final_set().map_err(|e| match e {
            PipelineError::Review(ReviewError::NotFinalized) => {
                PipelineError::Missing("the class set is not finalized; finish the review first".into())
            }
            other => other,
        })?;
        self.detect()?;
        let kind = self.config.pipeline_kind;
        let units = self.units()?;
        let detections = self.detections()?;
        let label = |u: &CorpusUnit| -> Option<DetectLabel> {
            if kind.has_detection() {
                detections.get(&u.unit_id).map(|d| d.label)
            } else {
                Some(DetectLabel::Yes)
            }
        };
        let yes: Vec<&CorpusUnit> = units.iter().filter(|u| label(u) == Some(DetectLabel::Yes)).collect();
        let classified: Vec<&CorpusUnit> = units
            .iter()
            .filter(|u| matches!(label(u), Some(DetectLabel::Yes | DetectLabel::No)))
            .collect();
        let ctx = self.ctx();
        let mut reports = Vec::new();

        let spec = self.config.long_summary_spec();
        reports.push(self.run_units(
            LONG_SUMMARY,
            &yes,
            |o: &Outcome<SummaryRecord>| o.ok().is_none(),
            |u| {
                Ok(Outcome::from(summarize_unit(
                    &ctx,
                    u,
                    SummaryKind::LongForClassification,
                    spec,
                )?))
            },
        )?);

        let long: BTreeMap<String, Outcome<SummaryRecord>> = self.typed(LONG_SUMMARY)?;
        let rated = final_set.rated();
        reports.push(self.run_units(
            FIT,
            &yes,
            |o: &Outcome<FitProfile>| o.ok().is_none(),
            |u| {
                let summary = match long.get(&u.unit_id) {
                    Some(Outcome::Ok(s)) => &s.text,
                    _ => {
                        return Ok(Outcome::Failed(upstream(
                            &u.unit_id,
                            Stage::ClassifyFit,
                            "no classification summary",
                        )))
                    }
                };
                let ratings = rated
                    .par_iter()
                    .map(|c| rate_fit(&ctx, &u.unit_id, &u.text, summary, c))
                    .collect::<Result<Vec<_>, StageError>>()?;
                let mut ok = Vec::new();
                let mut failed = Vec::new();
                for (r, c) in ratings.into_iter().zip(&rated) {
                    match r {
                        Ok(r) => ok.push(r),
                        Err(_) => failed.push(c.name.clone()),
                    }
                }
                Ok(match build_profile(&u.unit_id, ok, failed) {
                    Ok(p) => Outcome::Ok(p),
                    Err(e) => Outcome::Failed(upstream(&u.unit_id, Stage::ClassifyFit, &e.to_string())),
                })
            },
        )?);

        let profiles: BTreeMap<String, Outcome<FitProfile>> = self.typed(FIT)?;
        let means = run_means(profiles.values().filter_map(Outcome::ok));
        let none = final_set.none_class.clone();
        reports.push(self.run_units(
            CLASSIFY,
            &classified,
            |o: &Outcome<ClassificationResult>| o.ok().is_none(),
            |u| {
                if label(u) == Some(DetectLabel::No) {
                    return Ok(Outcome::Ok(none_result(&u.unit_id, &none)));
                }
                Ok(match profiles.get(&u.unit_id) {
                    Some(Outcome::Ok(p)) => Outcome::from(final_select(&ctx, &u.text, p, &means)?),
                    _ => Outcome::Failed(upstream(&u.unit_id, Stage::ClassifyFinal, "no fit profile")),
                })
            },
        )?);
        let last = reports.pop().expect("three reports");
        reports.push(self.finish(CLASSIFY, last)?);
        Ok(reports)
    }

    pub fn results(&self) -> Result<BTreeMap<String, Outcome<ClassificationResult>>, PipelineError> {
        self.typed(CLASSIFY)
    }

    /// Score classification results (and, for frames, presence) against a
    /// two-coder gold table.
    pub fn eval(&self, gold: Option<&Path>) -> Result<EvalReport, PipelineError> {
        let path = gold
            .map(Path::to_path_buf)
            .or_else(|| self.config.eval.gold.clone())
            .ok_or_else(|| PipelineError::Missing("no gold label file given".into()))?;
        let gold = read_gold(&path)?;
        let kind = self.config.pipeline_kind;
        let predictions: BTreeMap<String, LabelSet> = self
            .results()?
            .into_iter()
            .filter_map(|(k, o)| o.ok().map(|r| (k, r.labels.iter().cloned().collect())))
            .collect();
        let task = if kind.has_detection() {
            Task::Classification
        } else {
            Task::Topic
        };
        let filter = self.config.eval.agreement;
        let mut report = evaluate(&predictions, &gold, filter, task)?;
        if kind.has_detection() {
            let none = kind.none_class();
            let presence = |labels: &LabelSet| -> LabelSet {
                let present = !(labels.len() == 1 && labels.iter().all(|l| l.eq_ignore_ascii_case(none)));
                LabelSet::from([if present { "present" } else { "absent" }.to_string()])
            };
            let retained = crate::metrics::agreement_filter(&gold, filter)?.retained;
            let gold_presence: BTreeMap<String, LabelSet> =
                retained.iter().map(|(u, l)| (u.clone(), presence(l))).collect();
            let predicted_presence: BTreeMap<String, LabelSet> = self
                .detections()?
                .into_iter()
                .filter_map(|(u, d)| match d.label {
                    DetectLabel::Yes => Some((u, LabelSet::from(["present".to_string()]))),
                    DetectLabel::No => Some((u, LabelSet::from(["absent".to_string()]))),
                    DetectLabel::Failed => None,
                })
                .collect();
            if let Ok(r) = score(&predicted_presence, &gold_presence, Matching::Strict, Task::Presence) {
                report.reports.push(r);
            }
        }
        self.store.put_record(EVAL, "report", &report)?;
        self.write_derived()?;
        Ok(report)
    }

    /// Everything up to classification; with decisions, also the review,
    /// classification and (given gold labels) evaluation.
    pub fn run_all(
        &self,
        decisions: Option<Vec<DecisionInput>>,
        gold: Option<&Path>,
    ) -> Result<Vec<StageReport>, PipelineError> {
        let mut reports = vec![
            self.ingest()?,
            self.segment()?,
            self.detect()?,
            self.summarize()?,
            self.genclasses()?,
        ];
        let mut svc = self.review_service()?;
        if let Some(decisions) = decisions {
            if !svc.is_finalized() {
                self.apply_decisions(decisions)?;
                svc = self.review_service()?;
            }
        }
        if !svc.is_finalized() {
            return Ok(reports);
        }
        reports.extend(self.classify()?);
        if gold.is_some() || self.config.eval.gold.is_some() {
            self.eval(gold)?;
        }
        Ok(reports)
    }

    /// Rebuild every derived file from the run log. Returns the files written.
    pub fn write_derived(&self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut written = Vec::new();
        let entries = self.unit_entries()?;
        let order: BTreeMap<&str, usize> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.unit.unit_id.as_str(), i))
            .collect();
        let by_unit = |m: BTreeMap<String, Value>| -> Vec<Value> {
            let mut rows: Vec<(usize, String, Value)> = m
                .into_iter()
                .map(|(k, v)| (order.get(k.as_str()).copied().unwrap_or(usize::MAX), k, v))
                .collect();
            rows.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
            rows.into_iter().map(|(_, _, v)| v).collect()
        };

        let docs: Vec<Value> = self.store.records(INGEST).into_values().collect();
        if !docs.is_empty() {
            written.push(self.write_jsonl(files::DOCUMENTS, "documents", docs)?);
        }
        if !entries.is_empty() {
            let (ok, over): (Vec<&UnitEntry>, Vec<&UnitEntry>) =
                entries.iter().partition(|e| e.guard == TokenGuard::Ok);
            let ok = ok
                .into_iter()
                .map(|e| serde_json::to_value(&e.unit).expect("unit serializes"))
                .collect();
            written.push(self.write_jsonl(files::UNITS, "units", ok)?);
            let over = over
                .into_iter()
                .map(|e| serde_json::to_value(e).expect("unit serializes"))
                .collect();
            written.push(self.write_jsonl(files::EXCLUDED, "excluded_units", over)?);
        }
        let det = self.store.records(DETECT);
        if !det.is_empty() {
            written.push(self.write_jsonl(files::DETECTION, "detection", by_unit(det))?);
        }
        let short = self.store.records(SUMMARIZE);
        let long = self.store.records(LONG_SUMMARY);
        if !short.is_empty() || !long.is_empty() {
            let mut rows = by_unit(short);
            rows.extend(by_unit(long));
            written.push(self.write_jsonl(files::SUMMARIES, "summaries", rows)?);
        }
        if let Some(plan) = self.store.record(PLAN, "plan") {
            written.push(self.write_json(files::BATCHES, "batch_plan", plan)?);
        }
        let gen = self.store.records(CLASSGEN);
        if !gen.is_empty() {
            written.push(self.write_jsonl(files::GENERATION, "generation", gen.into_values().collect())?);
        }
        if let Some(registry) = self.registry()? {
            written.push(self.write_json(
                files::REGISTRY,
                "registry",
                serde_json::to_value(&registry).expect("registry serializes"),
            )?);
            let svc = self.review_service()?;
            if !svc.decisions().is_empty() {
                let review = json!({
                    "registry_hash": svc.registry_hash(),
                    "finalized_at": svc.state().finalized_at,
                    "decisions": svc.decisions(),
                    "registry": svc.state().registry,
                });
                written.push(self.write_json(files::REVIEW, "review", review)?);
            }
            if let Ok(f) = svc.export_final() {
                written.push(self.write_json(
                    files::FINAL,
                    "final_classes",
                    serde_json::to_value(&f).expect("final set serializes"),
                )?);
            }
        }
        let fit = self.store.records(FIT);
        if !fit.is_empty() {
            written.push(self.write_jsonl(files::PROFILES, "fit_profiles", by_unit(fit))?);
        }
        let results = self.store.records(CLASSIFY);
        if !results.is_empty() {
            written.push(self.write_jsonl(files::RESULTS, "results", by_unit(results))?);
        }
        if let Some(report) = self.store.record(EVAL, "report") {
            let parsed: EvalReport = serde_json::from_value(report.clone()).map_err(|e| PipelineError::BadRecord {
                stage: EVAL.into(),
                key: "report".into(),
                reason: e.to_string(),
            })?;
            written.push(self.write_json(files::METRICS, "metrics", report)?);
            let path = self.dir.join(files::METRICS_TABLE);
            let table = format!(
                "# config {}\n{}",
                self.config_hash,
                crate::metrics::render_table(&parsed)
            );
            write_atomic(&path, table.as_bytes())?;
            written.push(path);
        }
        Ok(written)
    }

    fn header(&self, schema: &str) -> Value {
        json!({
            "schema": format!("construct/{schema}"),
            "version": SCHEMA_VERSION,
            "config_hash": self.config_hash,
            "templates": self.templates.hashes(),
        })
    }

    fn write_jsonl(&self, name: &str, schema: &str, rows: Vec<Value>) -> Result<PathBuf, PipelineError> {
        let mut out = self.header(schema).to_string();
        out.push('\n');
        for r in rows {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        let path = self.dir.join(name);
        write_atomic(&path, out.as_bytes())?;
        Ok(path)
    }

    fn write_json(&self, name: &str, schema: &str, data: Value) -> Result<PathBuf, PipelineError> {
        let mut doc = self.header(schema);
        doc["data"] = data;
        let mut out = serde_json::to_string_pretty(&doc).expect("json serializes");
        out.push('\n');
        let path = self.dir.join(name);
        write_atomic(&path, out.as_bytes())?;
        Ok(path)
    }

    /// Units whose labels fall outside the final set (should always be empty).
    pub fn invalid_labels(&self) -> Result<Vec<String>, PipelineError> {
        let f = self.final_set()?;
        let names: BTreeSet<String> = f
            .classes
            .iter()
            .map(|c| c.name.clone())
            .chain([f.none_class.clone()])
            .collect();
        Ok(self
            .results()?
            .into_iter()
            .filter_map(|(k, o)| {
                o.ok()
                    .filter(|r| r.labels.iter().any(|l| !names.contains(l)))
                    .map(|_| k)
            })
            .collect())
    }
}

fn upstream(key: &str, stage: Stage, reason: &str) -> StageFailure {
    StageFailure {
        key: key.to_string(),
        stage,
        reason: reason.to_string(),
        attempts: 0,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Derived files in a run directory and their bytes (the event log and
/// manifest excluded), for comparing runs.
pub fn derived_snapshot(dir: &Path) -> std::io::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if p.is_file() && name != crate::store::EVENTS_FILE && name != crate::store::MANIFEST_FILE {
            out.insert(name, fs::read(&p)?);
        }
    }
    Ok(out)
}
