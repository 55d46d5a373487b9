//! Run configuration (TOML).
//!
//! ```toml
//! pipeline_kind = "frames_sentence"   # frames_paragraph | topics
//! seed = 42
//! # granularity = "sentence"          # defaults per kind
//! token_limit = 4096
//! reask_cap = 2
//! workers = 4
//!
//! [corpus]
//! path = "speeches.csv"               # relative to this file
//! format = "delimited_table"          # json_lines | plain_dir
//!
//! [batch]                             # all optional; defaults per kind
//! batch_size = 50
//! carryover = 0.2
//! class_cap = 9
//!
//! [endpoint]
//! kind = "http"                       # or "mock" with fixture = "mock.toml"
//! base_url = "http://localhost:8000/v1"
//! model = "llama-3-70b-instruct"
//! api_key_env = "CONSTRUCT_API_KEY"
//! max_in_flight = 8
//!
//! [stages.classgen]
//! temperature = 0.7
//! ```
//!
//! The config hash covers everything that shapes outputs, including the
//! content of the corpus, templates and mock fixture, but no paths and no
//! credentials.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::classgen::NormalizationRules;
use crate::corpus::{Granularity, IngestFormat, TokenEstimator};
use crate::gateway::{CompletionParams, MockFixture, RetryPolicy, Stage};
use crate::metrics::Matching;
use crate::prompts::{LengthSpec, PipelineKind, TemplateSet};
use crate::stage::default_params;

pub const DEFAULT_API_KEY_ENV: &str = "CONSTRUCT_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

impl ConfigError {
    pub fn problems(&self) -> Vec<String> {
        match self {
            ConfigError::Invalid(v) => v.clone(),
            other => vec![other.to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: PathBuf,
    pub format: IngestFormat,
    /// Replacement abbreviation list for the sentence splitter.
    #[serde(default)]
    pub abbreviations: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub batch_size: Option<usize>,
    pub carryover: Option<f64>,
    pub class_cap: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EndpointConfig {
    Mock {
        fixture: PathBuf,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
    Http {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
        #[serde(default = "default_profile")]
        profile: String,
    },
}

fn default_in_flight() -> usize {
    8
}
fn default_timeout() -> u64 {
    120
}
fn default_profile() -> String {
    "default".into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverride {
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryConfig {
    /// Length instruction checked on generation summaries.
    pub short: Option<LengthSpec>,
    /// Length instruction checked on classification summaries.
    pub long: Option<LengthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub gold: Option<PathBuf>,
    #[serde(default = "default_agreement")]
    pub agreement: Matching,
}

fn default_agreement() -> Matching {
    Matching::Lenient
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gold: None,
            agreement: default_agreement(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline_kind: PipelineKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub granularity: Option<Granularity>,
    #[serde(default = "default_token_limit")]
    pub token_limit: usize,
    #[serde(default)]
    pub token_estimator: Option<TokenEstimator>,
    #[serde(default = "default_reask_cap")]
    pub reask_cap: u32,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub batch: BatchConfig,
    #[serde(default)]
    pub normalization: NormalizationRules,
    pub endpoint: EndpointConfig,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Keyed by stage name (`detect_1`, ..., `classify_final`).
    #[serde(default)]
    pub stages: BTreeMap<String, StageOverride>,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub summary: SummaryConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_token_limit() -> usize {
    4096
}
fn default_reask_cap() -> u32 {
    2
}
fn default_workers() -> usize {
    4
}

impl RunConfig {
    /// Parse and validate; relative paths are resolved against `base`.
    pub fn from_toml(src: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut c: RunConfig = toml::from_str(src).map_err(|e| ConfigError::Parse {
            path: base.display().to_string(),
            reason: e.to_string(),
        })?;
        c.resolve_paths(base);
        let problems = c.validate();
        if problems.is_empty() {
            Ok(c)
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&src, base).map_err(|e| match e {
            ConfigError::Parse { reason, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus.path);
        if let Some(p) = &mut self.corpus.abbreviations {
            fix(p);
        }
        if let EndpointConfig::Mock { fixture, .. } = &mut self.endpoint {
            fix(fixture);
        }
        if let Some(p) = &mut self.templates_dir {
            fix(p);
        }
        if let Some(p) = &mut self.eval.gold {
            fix(p);
        }
    }

    /// Every problem found, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.batch_size() == 0 {
            p.push("batch.batch_size must be at least 1".into());
        }
        let c = self.carryover();
        if !(0.0..1.0).contains(&c) {
            p.push(format!("batch.carryover {c} must be in [0, 1)"));
        }
        if self.class_cap() == 0 {
            p.push("batch.class_cap must be at least 1".into());
        }
        if self.token_limit == 0 {
            p.push("token_limit must be positive".into());
        }
        if let Some(e) = &self.token_estimator {
            if !(e.chars_per_token > 0.0 && e.dense_chars_per_token > 0.0) {
                p.push("token_estimator ratios must be positive".into());
            }
        }
        if self.workers == 0 {
            p.push("workers must be at least 1".into());
        }
        if self.retry.max_attempts == 0 {
            p.push("retry.max_attempts must be at least 1".into());
        }
        for (name, o) in &self.stages {
            match name.parse::<Stage>() {
                Ok(stage) if !self.pipeline_kind.stages().contains(&stage) => {
                    p.push(format!("stages.{name}: {} has no such stage", self.pipeline_kind))
                }
                Ok(_) => {}
                Err(e) => p.push(format!("stages.{name}: {e}")),
            }
            if let Some(t) = o.temperature {
                if !(0.0..=2.0).contains(&t) {
                    p.push(format!("stages.{name}.temperature {t} must be in [0, 2]"));
                }
            }
            if o.max_output_tokens == Some(0) {
                p.push(format!("stages.{name}.max_output_tokens must be positive"));
            }
        }
        if !self.corpus.path.exists() {
            p.push(format!("corpus.path {} does not exist", self.corpus.path.display()));
        }
        if let Some(a) = &self.corpus.abbreviations {
            if !a.is_file() {
                p.push(format!("corpus.abbreviations {} is not a file", a.display()));
            }
        }
        match &self.endpoint {
            EndpointConfig::Mock { fixture, max_in_flight } => {
                if let Err(e) = MockFixture::load(fixture) {
                    p.push(format!("endpoint.fixture: {e}"));
                }
                if *max_in_flight == 0 {
                    p.push("endpoint.max_in_flight must be at least 1".into());
                }
            }
            EndpointConfig::Http {
                base_url,
                model,
                max_in_flight,
                ..
            } => {
                if !(base_url.starts_with("http://") || base_url.starts_with("https://")) {
                    p.push(format!("endpoint.base_url {base_url:?} must be an http(s) URL"));
                }
                if model.trim().is_empty() {
                    p.push("endpoint.model must not be empty".into());
                }
                if *max_in_flight == 0 {
                    p.push("endpoint.max_in_flight must be at least 1".into());
                }
            }
        }
        if let Err(e) = TemplateSet::load(self.pipeline_kind, self.templates_dir.as_deref()) {
            p.push(format!("templates: {e}"));
        }
        p
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity.unwrap_or_else(|| self.pipeline_kind.granularity())
    }

    pub fn batch_size(&self) -> usize {
        self.batch.batch_size.unwrap_or_else(|| self.pipeline_kind.batch_size())
    }

    pub fn carryover(&self) -> f64 {
        self.batch.carryover.unwrap_or_else(|| self.pipeline_kind.carryover())
    }

    pub fn class_cap(&self) -> usize {
        self.batch.class_cap.unwrap_or_else(|| self.pipeline_kind.class_cap())
    }

    pub fn token_estimator(&self) -> TokenEstimator {
        self.token_estimator.unwrap_or_default()
    }

    pub fn short_summary_spec(&self) -> LengthSpec {
        self.summary
            .short
            .unwrap_or_else(|| self.pipeline_kind.short_summary_spec())
    }

    pub fn long_summary_spec(&self) -> LengthSpec {
        self.summary
            .long
            .unwrap_or_else(|| self.pipeline_kind.long_summary_spec())
    }

    pub fn max_in_flight(&self) -> usize {
        match &self.endpoint {
            EndpointConfig::Mock { max_in_flight, .. } | EndpointConfig::Http { max_in_flight, .. } => *max_in_flight,
        }
    }

    /// Completion parameters per stage: defaults, then overrides.
    pub fn stage_params(&self) -> BTreeMap<Stage, CompletionParams> {
        let profile = match &self.endpoint {
            EndpointConfig::Http { profile, .. } => profile.clone(),
            EndpointConfig::Mock { .. } => "mock".into(),
        };
        self.pipeline_kind
            .stages()
            .iter()
            .map(|&stage| {
                let mut p = default_params(stage);
                p.endpoint_profile = profile.clone();
                if let Some(o) = self.stages.get(stage.as_str()) {
                    if let Some(t) = o.temperature {
                        p.temperature = t;
                    }
                    if let Some(m) = o.max_output_tokens {
                        p.max_output_tokens = m;
                    }
                    p.seed = o.seed.or(p.seed);
                }
                (stage, p)
            })
            .collect()
    }

    /// API key from the environment variable named in the endpoint config.
    pub fn api_key(&self) -> Option<String> {
        match &self.endpoint {
            EndpointConfig::Http { api_key_env, .. } => {
                std::env::var(api_key_env.as_deref().unwrap_or(DEFAULT_API_KEY_ENV)).ok()
            }
            EndpointConfig::Mock { .. } => None,
        }
    }

    /// Hash of everything that determines outputs. Paths and credentials
    /// are left out; the content behind the paths goes in.
    pub fn config_hash(&self, templates: &TemplateSet) -> Result<String, ConfigError> {
        fn io(path: &Path) -> impl FnOnce(std::io::Error) -> ConfigError + '_ {
            move |source| ConfigError::Io {
                path: path.display().to_string(),
                source,
            }
        }
        let endpoint = match &self.endpoint {
            EndpointConfig::Mock { fixture, .. } => {
                json!({"kind": "mock", "fixture_sha256": hash_file(fixture).map_err(io(fixture))?})
            }
            EndpointConfig::Http { model, .. } => json!({"kind": "http", "model": model}),
        };
        let abbreviations = match &self.corpus.abbreviations {
            Some(p) => Some(hash_file(p).map_err(io(p))?),
            None => None,
        };
        let params: BTreeMap<String, CompletionParams> = self
            .stage_params()
            .into_iter()
            .map(|(s, mut p)| {
                p.endpoint_profile.clear();
                (s.as_str().to_string(), p)
            })
            .collect();
        let body = json!({
            "pipeline_kind": self.pipeline_kind,
            "seed": self.seed,
            "granularity": self.granularity(),
            "token_limit": self.token_limit,
            "token_estimator": self.token_estimator(),
            "reask_cap": self.reask_cap,
            "corpus": {
                "format": self.corpus.format,
                "sha256": hash_path(&self.corpus.path).map_err(io(&self.corpus.path))?,
                "abbreviations_sha256": abbreviations,
            },
            "batch": {
                "batch_size": self.batch_size(),
                "carryover": self.carryover(),
                "class_cap": self.class_cap(),
            },
            "normalization": self.normalization,
            "summary": {"short": self.short_summary_spec(), "long": self.long_summary_spec()},
            "stages": params,
            "endpoint": endpoint,
            "templates": templates.hashes(),
        });
        Ok(hex::encode(Sha256::digest(body.to_string().as_bytes())))
    }
}

fn hash_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// File content hash, or for a directory the hash over sorted
/// (name, content) pairs of its files.
fn hash_path(path: &Path) -> std::io::Result<String> {
    if !path.is_dir() {
        return hash_file(path);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    let mut h = Sha256::new();
    for e in entries {
        h.update(
            e.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
        );
        h.update([0]);
        h.update(fs::read(&e)?);
        h.update([0]);
    }
    Ok(hex::encode(h.finalize()))
}
