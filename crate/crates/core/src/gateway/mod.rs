//! Chat-completion client: templating, transport with bounded retries,
//! structured-output extraction and the re-ask loop shared by every stage.

mod http;
mod json;
mod mock;
mod template;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::{debug, warn};

use crate::store::{Event, RunStore, StoreError};

pub use http::{HttpBackend, HttpBackendConfig};
pub use json::{extract_json, ExtractError};
pub use mock::{mock_router, MockBackend, MockFixture, MockRule};
pub use template::{transcript, ChatMessage, PromptTemplate, Role, Slot, Stage, TemplateError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub endpoint_profile: String,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_output_tokens: 1024,
            seed: None,
            endpoint_profile: "default".into(),
        }
    }
}

impl CompletionParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=2.0).contains(&self.temperature) || self.temperature.is_nan() {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.max_output_tokens == 0 {
            return Err("max_output_tokens must be positive".into());
        }
        Ok(())
    }
}

/// One call to the model. `key` ties the exchange to the unit (or batch) it
/// belongs to in the run log.
#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub stage: Stage,
    pub key: String,
    pub messages: Vec<ChatMessage>,
    pub params: CompletionParams,
}

impl CompletionRequest {
    pub fn hash(&self) -> String {
        let body = serde_json::json!({
            "stage": self.stage,
            "messages": self.messages,
            "params": self.params,
        });
        hex::encode(Sha256::digest(body.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("{0}")]
    Fatal(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            BackendError::Fatal(_) => false,
        }
    }
}

pub trait Backend: Send + Sync {
    fn send(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("no messages to send")]
    NoMessages,
    #[error("invalid completion parameters: {0}")]
    InvalidParams(String),
    #[error("transport exhausted after {attempts} attempts: {last}")]
    TransportExhausted { attempts: u32, last: BackendError },
    #[error("endpoint error: {0}")]
    Endpoint(BackendError),
    #[error("empty completion")]
    EmptyCompletion,
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt` (1-based; the first attempt has none).
    pub fn delay(&self, attempt: u32) -> Duration {
        if attempt <= 1 {
            return Duration::ZERO;
        }
        let factor = 1u64 << (attempt - 2).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

pub struct Gateway {
    backend: Arc<dyn Backend>,
    store: Option<Arc<RunStore>>,
    retry: RetryPolicy,
    in_flight: Semaphore,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            backend,
            store: None,
            retry,
            in_flight: Semaphore::new(max_in_flight),
        }
    }

    pub fn with_store(mut self, store: Arc<RunStore>) -> Self {
        self.store = Some(store);
        self
    }

    pub fn store(&self) -> Option<&Arc<RunStore>> {
        self.store.as_ref()
    }

    fn log(&self, event: Event) -> Result<(), GatewayError> {
        if let Some(store) = &self.store {
            store.append(event)?;
        }
        Ok(())
    }

    /// Send one request, retrying transport failures and 429/5xx statuses
    /// with exponential backoff. Each attempt logs one request event and one
    /// response event (carrying either the text or the error).
    pub fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        if request.messages.is_empty() {
            return Err(GatewayError::NoMessages);
        }
        request.params.validate().map_err(GatewayError::InvalidParams)?;
        let request_hash = request.hash();
        let max_attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            std::thread::sleep(self.retry.delay(attempt));
            self.log(Event::Request {
                stage: request.stage,
                key: request.key.clone(),
                attempt,
                request_hash: request_hash.clone(),
                messages: request.messages.clone(),
            })?;
            let result = {
                let _permit = self.in_flight.acquire();
                self.backend.send(request)
            };
            match result {
                Ok(text) => {
                    self.log(Event::Response {
                        stage: request.stage,
                        key: request.key.clone(),
                        attempt,
                        request_hash: request_hash.clone(),
                        response_hash: Some(hex::encode(Sha256::digest(text.as_bytes()))),
                        text: Some(text.clone()),
                        error: None,
                    })?;
                    if text.trim().is_empty() {
                        return Err(GatewayError::EmptyCompletion);
                    }
                    debug!(stage = %request.stage, key = %request.key, attempt, "completion ok");
                    return Ok(text);
                }
                Err(err) => {
                    self.log(Event::Response {
                        stage: request.stage,
                        key: request.key.clone(),
                        attempt,
                        request_hash: request_hash.clone(),
                        response_hash: None,
                        text: None,
                        error: Some(err.to_string()),
                    })?;
                    if !err.retryable() {
                        return Err(GatewayError::Endpoint(err));
                    }
                    if attempt >= max_attempts {
                        return Err(GatewayError::TransportExhausted {
                            attempts: attempt,
                            last: err,
                        });
                    }
                    warn!(stage = %request.stage, key = %request.key, attempt, %err, "retrying");
                }
            }
        }
    }

    /// Ask, parse, and re-ask on parse failure. A re-ask appends the rejected
    /// reply as an assistant turn followed by `correction` as a user turn.
    /// Empty completions count as parse failures. Gives up after `reask_cap`
    /// re-asks.
    pub fn ask_parsed<T, E: std::fmt::Display>(
        &self,
        mut request: CompletionRequest,
        reask_cap: u32,
        correction: &str,
        mut parse: impl FnMut(&str) -> Result<T, E>,
    ) -> Result<Asked<T>, AskError> {
        let mut attempts = 0u32;
        let mut last_reply;
        let mut last_error;
        loop {
            attempts += 1;
            match self.complete(&request) {
                Ok(reply) => match parse(&reply) {
                    Ok(value) => return Ok(Asked { value, reply, attempts }),
                    Err(e) => {
                        last_error = e.to_string();
                        last_reply = reply;
                    }
                },
                Err(GatewayError::EmptyCompletion) => {
                    last_error = GatewayError::EmptyCompletion.to_string();
                    last_reply = String::new();
                }
                Err(other) => return Err(AskError::Gateway(other)),
            }
            if attempts > reask_cap {
                return Err(AskError::Exhausted {
                    attempts,
                    last_reply,
                    reason: last_error,
                });
            }
            if !last_reply.trim().is_empty() {
                request.messages.push(ChatMessage::assistant(last_reply.clone()));
            }
            request.messages.push(ChatMessage::user(correction));
        }
    }
}

#[derive(Debug, Clone)]
pub struct Asked<T> {
    pub value: T,
    pub reply: String,
    pub attempts: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum AskError {
    #[error(transparent)]
    Gateway(GatewayError),
    #[error("no acceptable reply after {attempts} attempts ({reason})")]
    Exhausted {
        attempts: u32,
        last_reply: String,
        reason: String,
    },
}

impl AskError {
    pub fn attempts(&self) -> u32 {
        match self {
            AskError::Gateway(_) => 1,
            AskError::Exhausted { attempts, .. } => *attempts,
        }
    }
}

pub const JSON_CORRECTION: &str = "Respond with valid JSON only.";

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Scripted {
        replies: Mutex<Vec<Result<String, BackendError>>>,
        calls: AtomicU32,
    }

    impl Scripted {
        fn new(mut replies: Vec<Result<String, BackendError>>) -> Arc<Self> {
            replies.reverse();
            Arc::new(Self {
                replies: Mutex::new(replies),
                calls: AtomicU32::new(0),
            })
        }
    }

    impl Backend for Scripted {
        fn send(&self, _: &CompletionRequest) -> Result<String, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies
                .lock()
                .unwrap()
                .pop()
                .unwrap_or(Err(BackendError::Fatal("script exhausted".into())))
        }
    }

    fn request() -> CompletionRequest {
        CompletionRequest {
            stage: Stage::Detect2,
            key: "u1".into(),
            messages: vec![ChatMessage::system("s"), ChatMessage::user("q")],
            params: CompletionParams::default(),
        }
    }

    fn no_delay(max_attempts: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    #[test]
    fn scripted_reply_passes_through() {
        let gw = Gateway::new(Scripted::new(vec![Ok("Yes".into())]), no_delay(3), 1);
        assert_eq!(gw.complete(&request()).unwrap(), "Yes");
    }

    #[test]
    fn retries_transient_failures_and_logs_every_attempt() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(RunStore::open(dir.path(), "h").unwrap());
        let backend = Scripted::new(vec![
            Err(BackendError::Transport("reset".into())),
            Err(BackendError::Status {
                status: 503,
                body: "busy".into(),
            }),
            Ok("done".into()),
        ]);
        let gw = Gateway::new(backend.clone(), no_delay(3), 2).with_store(store.clone());
        assert_eq!(gw.complete(&request()).unwrap(), "done");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
        let events = store.events().unwrap();
        let requests = events
            .iter()
            .filter(|e| matches!(e.event, Event::Request { .. }))
            .count();
        let responses = events
            .iter()
            .filter(|e| matches!(e.event, Event::Response { .. }))
            .count();
        assert_eq!((requests, responses), (3, 3));
    }

    #[test]
    fn transport_exhaustion() {
        let backend = Scripted::new(vec![
            Err(BackendError::Transport("a".into())),
            Err(BackendError::Transport("b".into())),
        ]);
        let err = Gateway::new(backend, no_delay(2), 1).complete(&request()).unwrap_err();
        assert!(matches!(err, GatewayError::TransportExhausted { attempts: 2, .. }));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let backend = Scripted::new(vec![Err(BackendError::Status {
            status: 401,
            body: "no".into(),
        })]);
        let err = Gateway::new(backend.clone(), no_delay(5), 1)
            .complete(&request())
            .unwrap_err();
        assert!(matches!(err, GatewayError::Endpoint(_)));
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn empty_completion_is_an_error() {
        let err = Gateway::new(Scripted::new(vec![Ok("  ".into())]), no_delay(3), 1)
            .complete(&request())
            .unwrap_err();
        assert_eq!(err.to_string(), "empty completion");
    }

    #[test]
    fn invalid_params_and_empty_messages() {
        let gw = Gateway::new(Scripted::new(vec![]), no_delay(1), 1);
        let mut r = request();
        r.params.temperature = 2.5;
        assert!(matches!(gw.complete(&r), Err(GatewayError::InvalidParams(_))));
        r.messages.clear();
        assert!(matches!(gw.complete(&r), Err(GatewayError::NoMessages)));
    }

    #[test]
    fn ask_parsed_reasks_then_gives_up() {
        let backend = Scripted::new(vec![Ok("maybe".into()), Ok("".into()), Ok("perhaps".into())]);
        let gw = Gateway::new(backend, no_delay(1), 1);
        let err = gw
            .ask_parsed(request(), 2, "again", |r| if r == "ok" { Ok(()) } else { Err("bad") })
            .unwrap_err();
        assert!(matches!(err, AskError::Exhausted { attempts: 3, .. }));
    }

    #[test]
    fn ask_parsed_appends_correction_turns() {
        let backend = Scripted::new(vec![Ok("maybe".into()), Ok("ok".into())]);
        let gw = Gateway::new(backend, no_delay(1), 1);
        let asked = gw
            .ask_parsed(request(), 2, "again", |r| if r == "ok" { Ok(7) } else { Err("bad") })
            .unwrap();
        assert_eq!((asked.value, asked.attempts), (7, 2));
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 6,
            base_delay_ms: 100,
            max_delay_ms: 350,
        };
        let ms: Vec<u128> = (1..=5).map(|a| p.delay(a).as_millis()).collect();
        assert_eq!(ms, [0, 100, 200, 350, 350]);
    }
}
