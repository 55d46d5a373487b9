//! Scripted backend for offline runs and tests.
//!
//! A fixture is a TOML file of `[[rule]]` tables consulted in file order;
//! the first rule whose `stage` (if given) equals the request stage and whose
//! `match` regex (if given) matches the request transcript wins.
//!
//! ```toml
//! [[rule]]
//! stage = "detect_2"
//! match = '(?s)Text: .*regulat'
//! replies = ["It depends", "Yes"]   # or: reply = "Yes"
//! fail_first = 0                     # transient failures before replying
//! ```
//!
//! `replies` is indexed by how many times the same conversation has hit the
//! rule, so re-asks walk the list and stay deterministic under concurrency.
//! A conversation is identified by its stage, the request key when the mock
//! runs in-process, and its messages up to and including the first user turn. The last reply repeats once the list runs
//! out. With `expand = true`, `$1`/`${name}` in a reply are replaced by the
//! match's capture groups.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use regex::Regex;
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{transcript, Backend, BackendError, ChatMessage, CompletionParams, CompletionRequest, Role, Stage};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default)]
    pub stage: Option<Stage>,
    #[serde(default, rename = "match")]
    pub pattern: Option<String>,
    #[serde(default)]
    pub reply: Option<String>,
    #[serde(default)]
    pub replies: Vec<String>,
    #[serde(default)]
    pub fail_first: u32,
    /// HTTP status to report for the `fail_first` failures; transport error if unset.
    #[serde(default)]
    pub fail_status: Option<u16>,
    #[serde(default)]
    pub expand: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct MockFixture {
    #[serde(default, rename = "rule")]
    pub rules: Vec<MockRule>,
}

impl MockFixture {
    pub fn from_toml(src: &str) -> Result<Self, String> {
        toml::from_str(src).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let src = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&src).map_err(|e| format!("{}: {e}", path.display()))
    }
}

struct CompiledRule {
    rule: MockRule,
    regex: Option<Regex>,
}

pub struct MockBackend {
    rules: Vec<CompiledRule>,
    hits: Mutex<HashMap<(usize, String), u32>>,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(fixture: MockFixture) -> Result<Self, String> {
        let mut rules = Vec::with_capacity(fixture.rules.len());
        for (i, rule) in fixture.rules.into_iter().enumerate() {
            if rule.reply.is_none() && rule.replies.is_empty() {
                return Err(format!("rule {i} has neither `reply` nor `replies`"));
            }
            let regex = match &rule.pattern {
                Some(p) => Some(Regex::new(p).map_err(|e| format!("rule {i}: {e}"))?),
                None => None,
            };
            rules.push(CompiledRule { rule, regex });
        }
        Ok(Self {
            rules,
            hits: Mutex::new(HashMap::new()),
            calls: AtomicU64::new(0),
        })
    }

    pub fn from_toml(src: &str) -> Result<Self, String> {
        Self::new(MockFixture::from_toml(src)?)
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn conversation_key(stage: Stage, key: Option<&str>, messages: &[ChatMessage]) -> String {
        let mut h = Sha256::new();
        h.update(stage.as_str());
        h.update([0]);
        h.update(key.unwrap_or(""));
        for m in messages {
            h.update([0]);
            h.update(m.role.as_str());
            h.update([0]);
            h.update(&m.content);
            if m.role == Role::User {
                break;
            }
        }
        hex::encode(h.finalize())
    }

    pub fn reply_for(&self, stage: Stage, messages: &[ChatMessage]) -> Result<String, BackendError> {
        self.reply_keyed(stage, None, messages)
    }

    fn reply_keyed(
        &self,
        stage: Stage,
        request_key: Option<&str>,
        messages: &[ChatMessage],
    ) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = transcript(messages);
        for (idx, compiled) in self.rules.iter().enumerate() {
            let rule = &compiled.rule;
            if rule.stage.is_some_and(|s| s != stage) {
                continue;
            }
            let captures = match &compiled.regex {
                Some(re) => match re.captures(&text) {
                    Some(c) => Some(c),
                    None => continue,
                },
                None => None,
            };
            let key = (idx, Self::conversation_key(stage, request_key, messages));
            let hit = {
                let mut hits = self.hits.lock().expect("mock lock poisoned");
                let h = hits.entry(key).or_insert(0);
                *h += 1;
                *h - 1
            };
            if hit < rule.fail_first {
                return Err(match rule.fail_status {
                    Some(status) => BackendError::Status {
                        status,
                        body: "scripted failure".into(),
                    },
                    None => BackendError::Transport("scripted transient failure".into()),
                });
            }
            let n = (hit - rule.fail_first) as usize;
            let reply = if rule.replies.is_empty() {
                rule.reply.clone().unwrap_or_default()
            } else {
                rule.replies[n.min(rule.replies.len() - 1)].clone()
            };
            return Ok(match (rule.expand, captures) {
                (true, Some(c)) => {
                    let mut out = String::new();
                    c.expand(&reply, &mut out);
                    out
                }
                _ => reply,
            });
        }
        Err(BackendError::Fatal(format!("no mock rule matches stage {stage}")))
    }
}

impl Backend for MockBackend {
    fn send(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        self.reply_keyed(request.stage, Some(&request.key), &request.messages)
    }
}

/// Header carrying the pipeline stage on chat-completion requests.
pub const STAGE_HEADER: &str = "x-construct-stage";

#[derive(Deserialize)]
struct WireRequest {
    #[allow(dead_code)]
    model: String,
    messages: Vec<ChatMessage>,
    #[serde(default)]
    temperature: Option<f64>,
    #[serde(default)]
    max_tokens: Option<u32>,
}

async fn chat_completions(
    State(mock): State<Arc<MockBackend>>,
    headers: HeaderMap,
    Json(body): Json<WireRequest>,
) -> (StatusCode, Json<Value>) {
    let stage = headers
        .get(STAGE_HEADER)
        .and_then(|v| v.to_str().ok())
        .and_then(|s| s.parse::<Stage>().ok());
    let Some(stage) = stage else {
        return (
            StatusCode::BAD_REQUEST,
            Json(json!({"error": {"message": format!("missing or invalid {STAGE_HEADER} header")}})),
        );
    };
    let params = CompletionParams {
        temperature: body.temperature.unwrap_or(0.0),
        max_output_tokens: body.max_tokens.unwrap_or(1),
        ..CompletionParams::default()
    };
    if let Err(e) = params.validate() {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": {"message": e}})));
    }
    let mock = mock.clone();
    let result = tokio::task::spawn_blocking(move || mock.reply_for(stage, &body.messages))
        .await
        .unwrap_or_else(|e| Err(BackendError::Fatal(e.to_string())));
    match result {
        Ok(text) => (
            StatusCode::OK,
            Json(json!({
                "id": "mock",
                "object": "chat.completion",
                "choices": [{
                    "index": 0,
                    "message": {"role": "assistant", "content": text},
                    "finish_reason": "stop"
                }]
            })),
        ),
        Err(BackendError::Status { status, body }) => (
            StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
            Json(json!({"error": {"message": body}})),
        ),
        Err(BackendError::Transport(msg)) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({"error": {"message": msg}})),
        ),
        Err(BackendError::Fatal(msg)) => (StatusCode::NOT_FOUND, Json(json!({"error": {"message": msg}}))),
    }
}

/// Serve a mock over the chat-completion wire format at
/// `POST /v1/chat/completions`. The stage comes from the `x-construct-stage` header.
pub fn mock_router(mock: Arc<MockBackend>) -> Router {
    Router::new()
        .route("/v1/chat/completions", post(chat_completions))
        .with_state(mock)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn convo(text: &str) -> Vec<ChatMessage> {
        vec![ChatMessage::system("sys"), ChatMessage::user(text)]
    }

    #[test]
    fn first_matching_rule_wins() {
        let mock = MockBackend::from_toml(
            r#"
            [[rule]]
            stage = "detect_2"
            match = "risk"
            reply = "Yes"
            [[rule]]
            stage = "detect_2"
            reply = "No"
            [[rule]]
            reply = "fallback"
            "#,
        )
        .unwrap();
        assert_eq!(mock.reply_for(Stage::Detect2, &convo("AI risk")).unwrap(), "Yes");
        assert_eq!(mock.reply_for(Stage::Detect2, &convo("procedure")).unwrap(), "No");
        assert_eq!(mock.reply_for(Stage::Summarize, &convo("x")).unwrap(), "fallback");
    }

    #[test]
    fn replies_advance_per_conversation() {
        let mock = MockBackend::from_toml("[[rule]]\nreplies = [\"a\", \"b\"]\n").unwrap();
        let one = convo("one");
        let mut one_reask = one.clone();
        one_reask.push(ChatMessage::assistant("a"));
        one_reask.push(ChatMessage::user("again"));
        assert_eq!(mock.reply_for(Stage::Detect2, &one).unwrap(), "a");
        assert_eq!(mock.reply_for(Stage::Detect2, &convo("two")).unwrap(), "a");
        assert_eq!(mock.reply_for(Stage::Detect2, &one_reask).unwrap(), "b");
        assert_eq!(mock.reply_for(Stage::Detect2, &one_reask).unwrap(), "b");
    }

    #[test]
    fn scripted_failures_then_success() {
        let mock = MockBackend::from_toml("[[rule]]\nreply = \"ok\"\nfail_first = 2\nfail_status = 503\n").unwrap();
        let c = convo("x");
        assert!(matches!(
            mock.reply_for(Stage::Detect1, &c),
            Err(BackendError::Status { status: 503, .. })
        ));
        assert!(mock.reply_for(Stage::Detect1, &c).is_err());
        assert_eq!(mock.reply_for(Stage::Detect1, &c).unwrap(), "ok");
    }

    #[test]
    fn capture_expansion() {
        let mock = MockBackend::from_toml(
            "[[rule]]\nmatch = 'named (?P<name>[A-Za-z ]+?) with'\nreply = '{\"Frame\": \"${name}\"}'\nexpand = true\n",
        )
        .unwrap();
        let got = mock
            .reply_for(Stage::ClassifyFit, &convo("a frame named AI Risks with the"))
            .unwrap();
        assert_eq!(got, "{\"Frame\": \"AI Risks\"}");
    }

    #[test]
    fn no_match_is_fatal() {
        let mock = MockBackend::from_toml("[[rule]]\nstage = \"classgen\"\nreply = \"x\"\n").unwrap();
        assert!(matches!(
            mock.reply_for(Stage::Detect1, &convo("x")),
            Err(BackendError::Fatal(_))
        ));
    }

    #[test]
    fn invalid_fixtures_are_rejected() {
        assert!(MockBackend::from_toml("[[rule]]\nstage = \"detect_1\"\n").is_err());
        assert!(MockBackend::from_toml("[[rule]]\nmatch = \"(\"\nreply = \"x\"\n").is_err());
        assert!(MockBackend::from_toml("[[rule]]\nreply = \"x\"\ntypo = 1\n").is_err());
    }
}
