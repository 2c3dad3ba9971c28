//! LLM provider abstraction: deterministic mocks and trace-replay providers
//! for tests and offline work, plus a generic HTTP completion client.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{Money, Usage};
use crate::trace::TraceRecord;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider {llm_id}: query not present in trace: {query:?}")]
    UnknownTraceQuery { llm_id: String, query: String },
    #[error("provider {llm_id}: retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted {
        llm_id: String,
        attempts: u32,
        last: String,
    },
    #[error("provider {llm_id}: http status {status}")]
    HttpStatus { llm_id: String, status: u16 },
    #[error("provider {llm_id}: {msg}")]
    Transport { llm_id: String, msg: String },
    #[error("provider {llm_id}: busy (in-flight limit reached)")]
    Busy { llm_id: String },
    #[error("no provider registered for llm_id {0:?}")]
    Unregistered(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            backoff_ms: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub llm_id: String,
    pub prompt: String,
    pub max_output_tokens: u32,
    pub timeout_ms: u64,
    pub retry_policy: RetryPolicy,
}

impl CompletionRequest {
    pub fn new(llm_id: &str, prompt: &str) -> CompletionRequest {
        CompletionRequest {
            llm_id: llm_id.to_string(),
            prompt: prompt.to_string(),
            max_output_tokens: 256,
            timeout_ms: 30_000,
            retry_policy: RetryPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
    pub provider_reported_cost: Option<Money>,
    /// How many attempts the call took (1 = no retries).
    pub attempts: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HealthStatus {
    Healthy,
    Unhealthy(String),
}

pub trait Provider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError>;

    fn health_check(&self) -> HealthStatus {
        HealthStatus::Healthy
    }
}

/// llm_id -> provider map used by the cascade engine.
pub type ProviderRegistry = BTreeMap<String, Box<dyn Provider>>;

/// Deterministic answer rule for [`MockProvider`].
pub enum MockRule {
    /// Answer with the last whitespace token of the prompt.
    LastWord,
    /// Echo the whole prompt back.
    Echo,
    /// Always answer the same string.
    Fixed(String),
    /// Arbitrary deterministic function of the prompt.
    Custom(Box<dyn Fn(&str) -> String + Send + Sync>),
}

/// A provider whose answers are a pure function of (llm_id, prompt).
pub struct MockProvider {
    llm_id: String,
    rule: MockRule,
}

impl MockProvider {
    pub fn new(llm_id: &str, rule: MockRule) -> MockProvider {
        MockProvider {
            llm_id: llm_id.to_string(),
            rule,
        }
    }
}

impl Provider for MockProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        let text = match &self.rule {
            MockRule::LastWord => request
                .prompt
                .split_whitespace()
                .last()
                .unwrap_or("")
                .to_string(),
            MockRule::Echo => request.prompt.clone(),
            MockRule::Fixed(s) => s.clone(),
            MockRule::Custom(f) => f(&request.prompt),
        };
        let usage = Usage::new(
            request.prompt.split_whitespace().count() as u32,
            text.split_whitespace().count() as u32,
        );
        let _ = &self.llm_id;
        Ok(CompletionResponse {
            text,
            usage,
            latency_ms: 0,
            provider_reported_cost: None,
            attempts: 1,
        })
    }
}

/// Serves recorded responses for one llm_id, keyed by exact query text.
pub struct TraceReplayProvider {
    llm_id: String,
    responses: BTreeMap<String, (String, Usage)>,
}

impl TraceReplayProvider {
    pub fn from_records(llm_id: &str, records: &[TraceRecord]) -> TraceReplayProvider {
        let mut responses = BTreeMap::new();
        for rec in records {
            if let Some(resp) = rec.responses.get(llm_id) {
                responses.insert(rec.query_text.clone(), (resp.answer_text.clone(), resp.usage));
            }
        }
        TraceReplayProvider {
            llm_id: llm_id.to_string(),
            responses,
        }
    }
}

impl Provider for TraceReplayProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        let (text, usage) = self.responses.get(&request.prompt).ok_or_else(|| {
            ProviderError::UnknownTraceQuery {
                llm_id: self.llm_id.clone(),
                query: request.prompt.clone(),
            }
        })?;
        Ok(CompletionResponse {
            text: text.clone(),
            usage: *usage,
            latency_ms: 0,
            provider_reported_cost: None,
            attempts: 1,
        })
    }
}

/// What to do when the in-flight limit is hit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackpressureMode {
    Block,
    Busy,
}

// Counting semaphore bounding concurrent HTTP calls per provider.
struct InFlightLimit {
    state: Mutex<usize>,
    cv: Condvar,
    limit: usize,
}

impl InFlightLimit {
    fn new(limit: usize) -> InFlightLimit {
        InFlightLimit {
            state: Mutex::new(0),
            cv: Condvar::new(),
            limit,
        }
    }

    fn try_acquire(&self, mode: BackpressureMode) -> bool {
        let mut in_flight = self.state.lock().unwrap();
        match mode {
            BackpressureMode::Busy => {
                if *in_flight >= self.limit {
                    return false;
                }
            }
            BackpressureMode::Block => {
                while *in_flight >= self.limit {
                    in_flight = self.cv.wait(in_flight).unwrap();
                }
            }
        }
        *in_flight += 1;
        true
    }

    fn release(&self) {
        let mut in_flight = self.state.lock().unwrap();
        *in_flight -= 1;
        self.cv.notify_one();
    }
}

/// Wire shape of the generic completion protocol.
#[derive(Debug, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireUsage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WireResponse {
    pub text: String,
    pub usage: WireUsage,
}

/// Generic HTTP completion client speaking the single wire shape
/// (POST {model, prompt, max_tokens} -> {text, usage}).
pub struct HttpProvider {
    llm_id: String,
    base_url: String,
    api_key: Option<String>,
    limit: InFlightLimit,
    backpressure: BackpressureMode,
    total_attempts: AtomicU64,
}

impl HttpProvider {
    pub fn new(llm_id: &str, base_url: &str, api_key: Option<String>) -> HttpProvider {
        HttpProvider {
            llm_id: llm_id.to_string(),
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            limit: InFlightLimit::new(16),
            backpressure: BackpressureMode::Block,
            total_attempts: AtomicU64::new(0),
        }
    }

    /// Read FRUGAL_<PROVIDER>_BASE_URL and FRUGAL_<PROVIDER>_API_KEY.
    /// The provider name is the llm_id uppercased with `-` and `.` as `_`.
    pub fn from_env(llm_id: &str) -> Result<HttpProvider, ProviderError> {
        let tag: String = llm_id
            .to_uppercase()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        let base_url = std::env::var(format!("FRUGAL_{tag}_BASE_URL")).map_err(|_| {
            ProviderError::Transport {
                llm_id: llm_id.to_string(),
                msg: format!("FRUGAL_{tag}_BASE_URL not set"),
            }
        })?;
        let api_key = std::env::var(format!("FRUGAL_{tag}_API_KEY")).ok();
        Ok(HttpProvider::new(llm_id, &base_url, api_key))
    }

    pub fn with_in_flight_limit(mut self, limit: usize, mode: BackpressureMode) -> HttpProvider {
        self.limit = InFlightLimit::new(limit.max(1));
        self.backpressure = mode;
        self
    }

    /// Total HTTP attempts made over the provider's lifetime.
    pub fn attempts_made(&self) -> u64 {
        self.total_attempts.load(Ordering::Relaxed)
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/complete", self.base_url)
    }

    fn call_once(&self, request: &CompletionRequest) -> Result<CompletionResponse, CallFailure> {
        let body = WireRequest {
            model: request.llm_id.clone(),
            prompt: request.prompt.clone(),
            max_tokens: request.max_output_tokens,
        };
        let mut req = ureq::post(&self.endpoint())
            .timeout(Duration::from_millis(request.timeout_ms));
        if let Some(key) = &self.api_key {
            req = req.set("authorization", &format!("Bearer {key}"));
        }
        let started = std::time::Instant::now();
        match req.send_json(serde_json::to_value(&body).expect("wire request serializes")) {
            Ok(resp) => {
                let wire: WireResponse = resp
                    .into_json()
                    .map_err(|e| CallFailure::Fatal(format!("bad response body: {e}")))?;
                Ok(CompletionResponse {
                    text: wire.text,
                    usage: Usage::new(wire.usage.prompt_tokens, wire.usage.completion_tokens),
                    latency_ms: started.elapsed().as_millis() as u64,
                    provider_reported_cost: None,
                    attempts: 1,
                })
            }
            Err(ureq::Error::Status(code, _)) if code >= 500 => {
                Err(CallFailure::Transient(format!("status {code}")))
            }
            Err(ureq::Error::Status(code, _)) => Err(CallFailure::Status(code)),
            Err(ureq::Error::Transport(t)) => Err(CallFailure::Transient(t.to_string())),
        }
    }
}

enum CallFailure {
    Transient(String),
    Status(u16),
    Fatal(String),
}

impl Provider for HttpProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ProviderError> {
        if !self.limit.try_acquire(self.backpressure) {
            return Err(ProviderError::Busy {
                llm_id: self.llm_id.clone(),
            });
        }
        let result = (|| {
            let mut last = String::new();
            let max_attempts = request.retry_policy.max_attempts.max(1);
            for attempt in 1..=max_attempts {
                self.total_attempts.fetch_add(1, Ordering::Relaxed);
                match self.call_once(request) {
                    Ok(mut resp) => {
                        resp.attempts = attempt;
                        return Ok(resp);
                    }
                    Err(CallFailure::Status(code)) => {
                        return Err(ProviderError::HttpStatus {
                            llm_id: self.llm_id.clone(),
                            status: code,
                        })
                    }
                    Err(CallFailure::Fatal(msg)) => {
                        return Err(ProviderError::Transport {
                            llm_id: self.llm_id.clone(),
                            msg,
                        })
                    }
                    Err(CallFailure::Transient(msg)) => {
                        last = msg;
                        if attempt < max_attempts {
                            std::thread::sleep(Duration::from_millis(
                                request.retry_policy.backoff_ms * u64::from(attempt),
                            ));
                        }
                    }
                }
            }
            Err(ProviderError::RetriesExhausted {
                llm_id: self.llm_id.clone(),
                attempts: max_attempts,
                last,
            })
        })();
        self.limit.release();
        result
    }

    fn health_check(&self) -> HealthStatus {
        match ureq::get(&format!("{}/v1/healthz", self.base_url))
            .timeout(Duration::from_millis(2_000))
            .call()
        {
            Ok(_) => HealthStatus::Healthy,
            Err(e) => HealthStatus::Unhealthy(e.to_string()),
        }
    }
}

pub mod stub {
    //! In-process stub server speaking the provider wire protocol.
    //! Ships with the crate so client code and tests can run offline.

    use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
    use std::sync::Arc;

    use super::{WireRequest, WireResponse, WireUsage};

    pub struct StubServer {
        addr: String,
        stop: Arc<AtomicBool>,
        handle: Option<std::thread::JoinHandle<()>>,
        requests_seen: Arc<AtomicU64>,
    }

    /// Behavior of the stub per request, in arrival order.
    #[derive(Clone, Debug, PartialEq, Eq)]
    pub enum StubStep {
        /// Respond 200 echoing the last prompt word, with this usage.
        Ok { prompt_tokens: u32, completion_tokens: u32 },
        /// Respond with this HTTP status and empty body.
        Fail(u16),
    }

    impl StubServer {
        /// Start on an ephemeral port. `script` drives responses per request;
        /// when exhausted, the last step repeats.
        pub fn start(script: Vec<StubStep>) -> StubServer {
            assert!(!script.is_empty());
            let server = tiny_http::Server::http("127.0.0.1:0").expect("bind stub server");
            let addr = format!("http://{}", server.server_addr());
            let stop = Arc::new(AtomicBool::new(false));
            let requests_seen = Arc::new(AtomicU64::new(0));
            let stop2 = stop.clone();
            let seen2 = requests_seen.clone();
            let handle = std::thread::spawn(move || {
                while !stop2.load(Ordering::SeqCst) {
                    let req = match server.recv_timeout(std::time::Duration::from_millis(50)) {
                        Ok(Some(r)) => r,
                        Ok(None) => continue,
                        Err(_) => break,
                    };
                    if req.url().ends_with("/healthz") {
                        let _ = req.respond(tiny_http::Response::from_string("ok"));
                        continue;
                    }
                    let idx = seen2.fetch_add(1, Ordering::SeqCst) as usize;
                    let step = script.get(idx).unwrap_or(script.last().unwrap()).clone();
                    match step {
                        StubStep::Fail(code) => {
                            let _ = req.respond(
                                tiny_http::Response::from_string("").with_status_code(code),
                            );
                        }
                        StubStep::Ok {
                            prompt_tokens,
                            completion_tokens,
                        } => {
                            let mut req = req;
                            let mut body = String::new();
                            let _ = req.as_reader().read_to_string(&mut body);
                            let wire: WireRequest = match serde_json::from_str(&body) {
                                Ok(w) => w,
                                Err(_) => {
                                    let _ = req.respond(
                                        tiny_http::Response::from_string("bad request")
                                            .with_status_code(400),
                                    );
                                    continue;
                                }
                            };
                            let text = wire
                                .prompt
                                .split_whitespace()
                                .last()
                                .unwrap_or("")
                                .to_string();
                            let resp = WireResponse {
                                text,
                                usage: WireUsage {
                                    prompt_tokens,
                                    completion_tokens,
                                },
                            };
                            let json = serde_json::to_string(&resp).unwrap();
                            let _ = req.respond(
                                tiny_http::Response::from_string(json).with_header(
                                    tiny_http::Header::from_bytes(
                                        &b"Content-Type"[..],
                                        &b"application/json"[..],
                                    )
                                    .unwrap(),
                                ),
                            );
                        }
                    }
                }
            });
            StubServer {
                addr,
                stop,
                handle: Some(handle),
                requests_seen,
            }
        }

        pub fn base_url(&self) -> &str {
            &self.addr
        }

        pub fn requests_seen(&self) -> u64 {
            self.requests_seen.load(Ordering::SeqCst)
        }
    }

    impl Drop for StubServer {
        fn drop(&mut self) {
            self.stop.store(true, Ordering::SeqCst);
            if let Some(h) = self.handle.take() {
                let _ = h.join();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stub::{StubServer, StubStep};
    use super::*;

    #[test]
    fn mock_last_word_rule() {
        let p = MockProvider::new("m", MockRule::LastWord);
        let resp = p.complete(&CompletionRequest::new("m", "trend is down")).unwrap();
        assert_eq!(resp.text, "down");
        assert_eq!(p.health_check(), HealthStatus::Healthy);
    }

    #[test]
    fn mock_is_deterministic() {
        let p = MockProvider::new("m", MockRule::Echo);
        let req = CompletionRequest::new("m", "same prompt");
        let a = p.complete(&req).unwrap();
        let b = p.complete(&req).unwrap();
        assert_eq!(a.text, b.text);
        assert_eq!(a.usage, b.usage);
    }

    #[test]
    fn trace_replay_returns_recorded_response() {
        use crate::trace::{synthesize_trace, SyntheticLlm, SyntheticSpec};
        let records = synthesize_trace(
            &SyntheticSpec {
                llms: vec![SyntheticLlm {
                    llm_id: "a".into(),
                    accuracy: 1.0,
                    input_tokens: 7,
                    output_tokens: 1,
                }],
                overlaps: vec![],
                n_records: 3,
            },
            0,
        )
        .unwrap();
        let p = TraceReplayProvider::from_records("a", &records);
        let rec = &records[0];
        let resp = p
            .complete(&CompletionRequest::new("a", &rec.query_text))
            .unwrap();
        assert_eq!(resp.text, rec.responses["a"].answer_text);
        assert_eq!(resp.usage, rec.responses["a"].usage);
        assert!(matches!(
            p.complete(&CompletionRequest::new("a", "not in the trace")),
            Err(ProviderError::UnknownTraceQuery { .. })
        ));
    }

    #[test]
    fn http_provider_against_stub() {
        let stub = StubServer::start(vec![StubStep::Ok {
            prompt_tokens: 120,
            completion_tokens: 8,
        }]);
        let p = HttpProvider::new("remote", stub.base_url(), None);
        let resp = p.complete(&CompletionRequest::new("remote", "what is up")).unwrap();
        assert_eq!(resp.text, "up");
        assert_eq!(resp.usage, Usage::new(120, 8));
        assert_eq!(resp.attempts, 1);
        assert_eq!(p.health_check(), HealthStatus::Healthy);
    }

    #[test]
    fn http_provider_retries_transient_failures() {
        let stub = StubServer::start(vec![
            StubStep::Fail(503),
            StubStep::Ok {
                prompt_tokens: 1,
                completion_tokens: 1,
            },
        ]);
        let p = HttpProvider::new("remote", stub.base_url(), None);
        let mut req = CompletionRequest::new("remote", "hello there");
        req.retry_policy = RetryPolicy {
            max_attempts: 3,
            backoff_ms: 1,
        };
        let resp = p.complete(&req).unwrap();
        assert_eq!(resp.attempts, 2);
        assert_eq!(p.attempts_made(), 2);
    }

    #[test]
    fn http_provider_gives_up_on_4xx() {
        let stub = StubServer::start(vec![StubStep::Fail(401)]);
        let p = HttpProvider::new("remote", stub.base_url(), None);
        assert!(matches!(
            p.complete(&CompletionRequest::new("remote", "x")),
            Err(ProviderError::HttpStatus { status: 401, .. })
        ));
    }

    #[test]
    fn retries_bounded_by_max_attempts() {
        let stub = StubServer::start(vec![StubStep::Fail(500)]);
        let p = HttpProvider::new("remote", stub.base_url(), None);
        let mut req = CompletionRequest::new("remote", "x");
        req.retry_policy = RetryPolicy {
            max_attempts: 2,
            backoff_ms: 1,
        };
        assert!(matches!(
            p.complete(&req),
            Err(ProviderError::RetriesExhausted { attempts: 2, .. })
        ));
        assert_eq!(p.attempts_made(), 2);
    }

    #[test]
    fn health_reflects_most_recent_probe() {
        let stub = StubServer::start(vec![StubStep::Ok {
            prompt_tokens: 1,
            completion_tokens: 1,
        }]);
        let url = stub.base_url().to_string();
        let p = HttpProvider::new("remote", &url, None);
        assert_eq!(p.health_check(), HealthStatus::Healthy);
        drop(stub);
        match p.health_check() {
            HealthStatus::Unhealthy(reason) => assert!(!reason.is_empty()),
            HealthStatus::Healthy => panic!("expected unhealthy after stub stopped"),
        }
    }
}
