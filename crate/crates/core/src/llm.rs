//! Chat-completion boundary.
//!
//! [`LlmBackend`] is the single seam between the pipeline and a model.
//! [`HttpBackend`] speaks the common JSON-over-HTTP chat-completion shape;
//! endpoints with the `mock:` scheme resolve to deterministic in-process
//! backends used for tests and offline runs.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::eval::CostRecord;
use crate::filter::KeywordSet;
use crate::ingest::Tokenizer;
use crate::pruner::{Excerpt, DEFAULT_FAIL_MARKERS};

pub const ENV_URL: &str = "CICD_TRIAGE_LLM_URL";
pub const ENV_MODEL: &str = "CICD_TRIAGE_LLM_MODEL";
pub const ENV_KEY: &str = "CICD_TRIAGE_LLM_KEY";

/// Tag placed in the system message of root-cause prompts.
pub const RCA_TASK_TAG: &str = "[task: ci-root-cause-analysis]";
/// Tag placed in the system message of remediation prompts.
pub const SOLUTION_TASK_TAG: &str = "[task: ci-remediation-plan]";
pub const LOGS_OPEN: &str = "<log_blocks>";
pub const LOGS_CLOSE: &str = "</log_blocks>";
pub const KNOWLEDGE_OPEN: &str = "<knowledge>";
pub const KNOWLEDGE_CLOSE: &str = "</knowledge>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    pub fn token_count(&self, tok: &dyn Tokenizer) -> usize {
        self.messages.iter().map(|m| tok.count(&m.content)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
    #[error("unsupported endpoint {0}")]
    Endpoint(String),
    #[error("all {attempts} attempts failed; last error: {last}")]
    Exhausted { attempts: usize, last: Box<LlmError> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    /// Maximum number of query rounds per stage; 0 behaves as 1.
    pub max_retries: usize,
    pub timeout_secs: u64,
    #[serde(skip)]
    pub api_key: Option<String>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint: "mock:heuristic".into(),
            model: "mock".into(),
            temperature: 0.1,
            max_retries: 3,
            timeout_secs: 120,
            api_key: None,
        }
    }
}

impl LlmConfig {
    /// Overlays the `CICD_TRIAGE_LLM_*` environment variables.
    pub fn with_env(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_URL) {
            self.endpoint = url;
        }
        if let Ok(model) = std::env::var(ENV_MODEL) {
            self.model = model;
        }
        if let Ok(key) = std::env::var(ENV_KEY) {
            self.api_key = Some(key);
        }
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0) {
            return Err(format!("temperature {} must be >= 0", self.temperature));
        }
        Ok(())
    }

    pub fn max_attempts(&self) -> usize {
        self.max_retries.max(1)
    }

    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            temperature: self.temperature,
            messages,
        }
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError>;
}

/// Sends the request, retrying transport failures. Every attempt is one
/// query round and is charged its prompt tokens; the completion is charged
/// on success.
pub fn invoke_llm(
    backend: &dyn LlmBackend,
    request: &ChatRequest,
    cfg: &LlmConfig,
    tok: &dyn Tokenizer,
    cost: &mut CostRecord,
) -> Result<String, LlmError> {
    invoke_with_budget(backend, request, cfg.max_attempts(), tok, cost)
}

pub(crate) fn invoke_with_budget(
    backend: &dyn LlmBackend,
    request: &ChatRequest,
    attempts: usize,
    tok: &dyn Tokenizer,
    cost: &mut CostRecord,
) -> Result<String, LlmError> {
    let prompt_tokens = request.token_count(tok);
    let mut last = None;
    for attempt in 1..=attempts.max(1) {
        cost.query_rounds += 1;
        cost.prompt_tokens += prompt_tokens;
        match backend.complete(request) {
            Ok(text) => {
                cost.completion_tokens += tok.count(&text);
                return Ok(text);
            }
            Err(e) => {
                log::warn!("llm attempt {attempt}/{attempts} failed: {e}");
                last = Some(e);
            }
        }
    }
    Err(LlmError::Exhausted {
        attempts: attempts.max(1),
        last: Box::new(last.expect("at least one attempt")),
    })
}

/// OpenAI-style chat-completion over HTTP.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(cfg: &LlmConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(HttpBackend {
            client,
            endpoint: cfg.endpoint.clone(),
            api_key: cfg.api_key.clone(),
        })
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let mut req = self.client.post(&self.endpoint).json(request);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                LlmError::Timeout
            } else {
                LlmError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let body = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(LlmError::Status {
                status: status.as_u16(),
                body,
            });
        }
        let value: serde_json::Value =
            serde_json::from_str(&body).map_err(|e| LlmError::BadResponse(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))
    }
}

/// Returns the same text for every request.
pub struct FixedBackend(pub String);

impl LlmBackend for FixedBackend {
    fn complete(&self, _request: &ChatRequest) -> Result<String, LlmError> {
        Ok(self.0.clone())
    }
}

/// Extracts the log excerpt embedded in the last user message.
pub fn request_excerpt(request: &ChatRequest) -> Option<Excerpt> {
    let msg = request
        .messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User && m.content.contains(LOGS_OPEN))?;
    let start = msg.content.rfind(LOGS_OPEN)? + LOGS_OPEN.len();
    let end = msg.content[start..].find(LOGS_CLOSE)? + start;
    Some(Excerpt::parse(&msg.content[start..end]))
}

fn is_task(request: &ChatRequest, tag: &str) -> bool {
    request
        .messages
        .iter()
        .any(|m| m.role == Role::System && m.content.contains(tag))
}

/// Groups sorted line numbers into `[a]` / `[a, b]` JSON ranges.
fn ranges_json(lines: &BTreeSet<usize>) -> Vec<serde_json::Value> {
    let mut out = Vec::new();
    let mut iter = lines.iter().copied();
    let Some(mut start) = iter.next() else {
        return out;
    };
    let mut end = start;
    let push = |out: &mut Vec<serde_json::Value>, s: usize, e: usize| {
        out.push(if s == e { json!([s]) } else { json!([s, e]) });
    };
    for l in iter {
        if l == end + 1 {
            end = l;
        } else {
            push(&mut out, start, end);
            start = l;
            end = l;
        }
    }
    push(&mut out, start, end);
    out
}

fn rca_json(picked: &BTreeSet<usize>, excerpt: &Excerpt, fallback_note: &str) -> String {
    if picked.is_empty() {
        return json!({
            "log_analysis": [],
            "root_cause": [fallback_note],
        })
        .to_string();
    }
    let first = *picked.iter().next().unwrap();
    let cause = excerpt.line(first).unwrap_or("").trim();
    let cause = if cause.is_empty() { "unknown failure" } else { cause };
    json!({
        "log_analysis": [{
            "error_logs": ranges_json(picked),
            "analysis": format!("Failure reported at line {first}: {cause}"),
        }],
        "root_cause": [cause],
    })
    .to_string()
}

/// The last line in the excerpt that looks like an error, as a guess.
fn last_keyword_line(excerpt: &Excerpt, keywords: &KeywordSet) -> BTreeSet<usize> {
    excerpt
        .lines()
        .filter(|l| keywords.matches(&l.text))
        .map(|l| l.number)
        .last()
        .into_iter()
        .collect()
}

fn solution_json(request: &ChatRequest) -> String {
    let user = request
        .messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .unwrap_or("");
    let cited: Vec<String> = user
        .find(KNOWLEDGE_OPEN)
        .and_then(|s| {
            let body = &user[s + KNOWLEDGE_OPEN.len()..];
            body.find(KNOWLEDGE_CLOSE).map(|e| &body[..e])
        })
        .map(|k| {
            k.lines()
                .filter_map(|l| l.strip_prefix("[doc:"))
                .filter_map(|l| l.split(']').next())
                .take(1)
                .map(str::to_string)
                .collect()
        })
        .unwrap_or_default();
    let explanation = match cited.first() {
        Some(doc) => format!("Apply the remediation documented in {doc}, then re-run the pipeline."),
        None => "No matching knowledge was found; re-run the pipeline and escalate if it fails again.".to_string(),
    };
    json!({
        "explanation": explanation,
        "citations": cited,
        "tool_calls": [
            {"tool": "retry_pipeline", "arguments": {"run_id": "latest"}}
        ],
    })
    .to_string()
}

/// Deterministic stand-in for a compliant model: quotes failure-marker
/// lines (else the last keyword line) from root-cause prompts, and proposes
/// a retry citing the top knowledge entry for remediation prompts.
pub struct HeuristicBackend {
    keywords: KeywordSet,
}

impl Default for HeuristicBackend {
    fn default() -> Self {
        HeuristicBackend {
            keywords: KeywordSet::default(),
        }
    }
}

impl LlmBackend for HeuristicBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        if is_task(request, SOLUTION_TASK_TAG) {
            return Ok(solution_json(request));
        }
        let excerpt = request_excerpt(request).unwrap_or_default();
        let mut picked: BTreeSet<usize> = excerpt
            .lines()
            .filter(|l| DEFAULT_FAIL_MARKERS.iter().any(|m| l.text.contains(m)))
            .map(|l| l.number)
            .collect();
        if picked.is_empty() {
            picked = last_keyword_line(&excerpt, &self.keywords);
        }
        Ok(rca_json(&picked, &excerpt, "no failure evidence in the provided logs"))
    }
}

/// Closed-world oracle: quotes exactly those provided lines that carry a
/// ground-truth annotation. With none visible it guesses the last keyword
/// line; with no keyword lines either it reports nothing.
pub struct OracleBackend {
    truth: BTreeSet<usize>,
    keywords: KeywordSet,
}

impl OracleBackend {
    pub fn new(truth: impl IntoIterator<Item = usize>) -> Self {
        OracleBackend {
            truth: truth.into_iter().collect(),
            keywords: KeywordSet::default(),
        }
    }
}

impl LlmBackend for OracleBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        if is_task(request, SOLUTION_TASK_TAG) {
            return Ok(solution_json(request));
        }
        let excerpt = request_excerpt(request).unwrap_or_default();
        let mut picked: BTreeSet<usize> = excerpt
            .lines()
            .map(|l| l.number)
            .filter(|n| self.truth.contains(n))
            .collect();
        if picked.is_empty() {
            picked = last_keyword_line(&excerpt, &self.keywords);
        }
        Ok(rca_json(&picked, &excerpt, "undetermined"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The attempt fails at the transport level.
    Timeout,
    /// The attempt returns text that is not valid report JSON.
    Malformed,
}

/// Wraps a backend and injects `failures` faults before delegating.
pub struct FlakyBackend<B> {
    inner: B,
    fault: Fault,
    failures: usize,
    calls: AtomicUsize,
}

impl<B: LlmBackend> FlakyBackend<B> {
    pub fn new(inner: B, fault: Fault, failures: usize) -> Self {
        FlakyBackend {
            inner,
            fault,
            failures,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: LlmBackend> LlmBackend for FlakyBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.failures {
            return match self.fault {
                Fault::Timeout => Err(LlmError::Timeout),
                Fault::Malformed => Ok("Sure! Here is the analysis: {\"log_analysis\": [".into()),
            };
        }
        self.inner.complete(request)
    }
}

impl LlmBackend for Box<dyn LlmBackend> {
    fn complete(&self, request: &ChatRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

/// Resolves an endpoint to a backend.
///
/// Mock endpoints: `mock:heuristic`, `mock:fixed=<path>`, with optional
/// `?fail=<n>&fault=timeout|malformed` fault injection.
pub fn backend_for(cfg: &LlmConfig) -> Result<Box<dyn LlmBackend>, LlmError> {
    let Some(spec) = cfg.endpoint.strip_prefix("mock:") else {
        if cfg.endpoint.starts_with("http://") || cfg.endpoint.starts_with("https://") {
            return Ok(Box::new(HttpBackend::new(cfg)?));
        }
        return Err(LlmError::Endpoint(cfg.endpoint.clone()));
    };
    let (kind, query) = spec.split_once('?').unwrap_or((spec, ""));
    let base: Box<dyn LlmBackend> = if kind == "heuristic" || kind.is_empty() {
        Box::new(HeuristicBackend::default())
    } else if let Some(path) = kind.strip_prefix("fixed=") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Endpoint(format!("{}: {e}", cfg.endpoint)))?;
        Box::new(FixedBackend(text))
    } else {
        return Err(LlmError::Endpoint(cfg.endpoint.clone()));
    };
    let mut failures = 0;
    let mut fault = Fault::Timeout;
    for pair in query.split('&').filter(|p| !p.is_empty()) {
        match pair.split_once('=') {
            Some(("fail", n)) => {
                failures = n
                    .parse()
                    .map_err(|_| LlmError::Endpoint(cfg.endpoint.clone()))?
            }
            Some(("fault", "timeout")) => fault = Fault::Timeout,
            Some(("fault", "malformed")) => fault = Fault::Malformed,
            _ => return Err(LlmError::Endpoint(cfg.endpoint.clone())),
        }
    }
    if failures == 0 {
        Ok(base)
    } else {
        Ok(Box::new(FlakyBackend::new(base, fault, failures)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::RegexTokenizer;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn req() -> ChatRequest {
        LlmConfig::default().request(vec![ChatMessage::user("hello there")])
    }

    #[test]
    fn mock_returns_fixed_text_in_one_round() {
        let mut cost = CostRecord::new("c");
        let out = invoke_llm(&FixedBackend("{}".into()), &req(), &LlmConfig::default(), &RegexTokenizer, &mut cost).unwrap();
        assert_eq!(out, "{}");
        assert_eq!(cost.query_rounds, 1);
        assert_eq!(cost.prompt_tokens, 2);
        assert_eq!(cost.completion_tokens, 2);
    }

    #[test]
    fn timeout_then_success_is_two_rounds() {
        let backend = FlakyBackend::new(FixedBackend("ok".into()), Fault::Timeout, 1);
        let mut cost = CostRecord::new("c");
        let out = invoke_llm(&backend, &req(), &LlmConfig::default(), &RegexTokenizer, &mut cost).unwrap();
        assert_eq!(out, "ok");
        assert_eq!(cost.query_rounds, 2);
    }

    #[test]
    fn exhaustion_reports_max_retries_rounds() {
        let backend = FlakyBackend::new(FixedBackend("ok".into()), Fault::Timeout, 10);
        let mut cost = CostRecord::new("c");
        let cfg = LlmConfig::default();
        let err = invoke_llm(&backend, &req(), &cfg, &RegexTokenizer, &mut cost).unwrap_err();
        assert!(matches!(err, LlmError::Exhausted { attempts: 3, .. }));
        assert_eq!(cost.query_rounds, cfg.max_retries);
    }

    #[test]
    fn mock_endpoint_parsing() {
        let mut cfg = LlmConfig { endpoint: "mock:heuristic?fail=2&fault=malformed".into(), ..Default::default() };
        assert!(backend_for(&cfg).is_ok());
        cfg.endpoint = "mock:nonsense".into();
        assert!(backend_for(&cfg).is_err());
        cfg.endpoint = "ftp://x".into();
        assert!(backend_for(&cfg).is_err());
    }

    #[test]
    fn ranges_group_contiguous_lines() {
        let lines: BTreeSet<usize> = [3, 4, 5, 9, 11, 12].into_iter().collect();
        assert_eq!(
            serde_json::Value::Array(ranges_json(&lines)).to_string(),
            "[[3,5],[9],[11,12]]"
        );
    }

    #[test]
    fn oracle_quotes_only_visible_truth() {
        let excerpt = "10\tstarting\n11\terror: boom\n12\tcontext\n...\n40\tfatal: other\n";
        let request = LlmConfig::default().request(vec![
            ChatMessage::system(RCA_TASK_TAG),
            ChatMessage::user(format!("{LOGS_OPEN}\n{excerpt}{LOGS_CLOSE}")),
        ]);
        let out = OracleBackend::new([11, 12, 99]).complete(&request).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["log_analysis"][0]["error_logs"], json!([[11, 12]]));

        let guess = OracleBackend::new([99]).complete(&request).unwrap();
        let v: serde_json::Value = serde_json::from_str(&guess).unwrap();
        assert_eq!(v["log_analysis"][0]["error_logs"], json!([[40]]));

        let quiet = LlmConfig::default().request(vec![
            ChatMessage::system(RCA_TASK_TAG),
            ChatMessage::user(format!("{LOGS_OPEN}\n1\tall good\n{LOGS_CLOSE}")),
        ]);
        let none = OracleBackend::new([99]).complete(&quiet).unwrap();
        let v: serde_json::Value = serde_json::from_str(&none).unwrap();
        assert_eq!(v["log_analysis"], json!([]));
    }

    #[test]
    fn http_backend_speaks_chat_completion() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let reply = r#"{"choices":[{"message":{"role":"assistant","content":"pong"}}]}"#;
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            )
            .unwrap();
            (String::from_utf8(body).unwrap(), auth)
        });
        let cfg = LlmConfig {
            endpoint: format!("http://{addr}/v1/chat/completions"),
            model: "m1".into(),
            api_key: Some("sekret".into()),
            ..Default::default()
        };
        let backend = backend_for(&cfg).unwrap();
        let out = backend.complete(&cfg.request(vec![ChatMessage::user("ping")])).unwrap();
        assert_eq!(out, "pong");
        let (body, auth) = server.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(sent["model"], "m1");
        assert_eq!(sent["temperature"], 0.1);
        assert_eq!(sent["messages"][0], json!({"role": "user", "content": "ping"}));
        assert!(auth.eq_ignore_ascii_case("authorization: Bearer sekret"), "{auth}");
    }
}
