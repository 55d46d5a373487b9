//! Plumbing shared by the model-driven stages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::gateway::{
    AskError, Asked, ChatMessage, CompletionParams, CompletionRequest, Gateway, GatewayError, Slot, Stage,
    TemplateError,
};
use crate::prompts::{PromptError, TemplateSet};
use crate::store::StoreError;

/// Errors that stop a stage outright. Model misbehaviour never lands here;
/// it becomes a per-unit [`StageFailure`].
#[derive(Debug, thiserror::Error)]
pub enum StageError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("rendering {stage} template: {source}")]
    Render {
        stage: Stage,
        #[source]
        source: TemplateError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A unit (or batch) that could not get through a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub key: String,
    pub stage: Stage,
    pub reason: String,
    pub attempts: u32,
}

/// What a stage stores per key: the record, or why there is none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome<T> {
    Ok(T),
    Failed(StageFailure),
}

impl<T> Outcome<T> {
    pub fn ok(&self) -> Option<&T> {
        match self {
            Outcome::Ok(t) => Some(t),
            Outcome::Failed(_) => None,
        }
    }
}

impl<T> From<Result<T, StageFailure>> for Outcome<T> {
    fn from(r: Result<T, StageFailure>) -> Self {
        match r {
            Ok(t) => Outcome::Ok(t),
            Err(f) => Outcome::Failed(f),
        }
    }
}

/// Everything a stage needs to talk to the model.
pub struct StageContext<'a> {
    pub gateway: &'a Gateway,
    pub templates: &'a TemplateSet,
    pub params: &'a BTreeMap<Stage, CompletionParams>,
    pub reask_cap: u32,
}

impl StageContext<'_> {
    pub fn params(&self, stage: Stage) -> CompletionParams {
        self.params
            .get(&stage)
            .cloned()
            .unwrap_or_else(|| default_params(stage))
    }

    pub fn render(&self, stage: Stage, values: &BTreeMap<Slot, String>) -> Result<Vec<ChatMessage>, StageError> {
        self.templates
            .get(stage)?
            .render_slots(values)
            .map_err(|source| StageError::Render { stage, source })
    }

    pub fn template_id(&self, stage: Stage) -> String {
        self.templates
            .get(stage)
            .map(|t| t.template_id.clone())
            .unwrap_or_default()
    }

    pub fn request(&self, stage: Stage, key: &str, messages: Vec<ChatMessage>) -> CompletionRequest {
        CompletionRequest {
            stage,
            key: key.to_string(),
            messages,
            params: self.params(stage),
        }
    }

    /// `ask_parsed` with failures sorted into fatal (store) and per-key ones.
    pub fn ask<T, E: std::fmt::Display>(
        &self,
        request: CompletionRequest,
        correction: &str,
        parse: impl FnMut(&str) -> Result<T, E>,
    ) -> Result<Result<Asked<T>, StageFailure>, StageError> {
        let stage = request.stage;
        let key = request.key.clone();
        match self.gateway.ask_parsed(request, self.reask_cap, correction, parse) {
            Ok(a) => Ok(Ok(a)),
            Err(AskError::Gateway(GatewayError::Store(e))) => Err(StageError::Store(e)),
            Err(e) => Ok(Err(StageFailure {
                key,
                stage,
                attempts: e.attempts(),
                reason: e.to_string(),
            })),
        }
    }
}

/// Generation samples; everything else is parsed strictly and runs cold.
pub fn default_params(stage: Stage) -> CompletionParams {
    CompletionParams {
        temperature: if stage == Stage::Classgen { 0.7 } else { 0.0 },
        max_output_tokens: match stage {
            Stage::Classgen => 4096,
            Stage::Detect2 | Stage::ClassifyFinal => 64,
            _ => 512,
        },
        ..CompletionParams::default()
    }
}
