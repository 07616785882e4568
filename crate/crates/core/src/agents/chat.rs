//! Chat-completion plumbing: message types, backend trait, the HTTP backend
//! for OpenAI-compatible endpoints, a retrying client that keeps a JSONL
//! transcript, and scripted backends for offline runs.

use std::collections::VecDeque;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    pub arguments: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
}

impl ChatMessage {
    pub fn new(role: ChatRole, content: impl Into<String>) -> Self {
        Self { role, content: content.into(), tool_call: None }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(ChatRole::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(ChatRole::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(ChatRole::Assistant, content)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.content.is_empty() && self.tool_call.is_none() {
            return Err("message content is empty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum EndpointError {
    #[error("transient endpoint failure: {0}")]
    Transient(String),
    #[error("endpoint timed out")]
    Timeout,
    #[error("endpoint failure: {0}")]
    Fatal(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl EndpointError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EndpointError::Transient(_) | EndpointError::Timeout)
    }

    pub fn from_status(code: u16, body: String) -> Self {
        if code == 429 || code >= 500 {
            EndpointError::Transient(format!("HTTP {code}: {body}"))
        } else {
            EndpointError::Fatal(format!("HTTP {code}: {body}"))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// First backoff in milliseconds; doubled after every failed attempt.
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, backoff_ms: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Base URL up to and including the API version, e.g. `https://host/v1`.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

fn default_temperature() -> f64 {
    0.7
}
fn default_max_tokens() -> u32 {
    4096
}
fn default_timeout() -> f64 {
    120.0
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs > 0.0) {
            return Err("timeout must be positive".into());
        }
        if self.endpoint.trim().is_empty() || self.model.trim().is_empty() {
            return Err("endpoint and model are required".into());
        }
        Ok(())
    }
}

/// Anything that turns a message list into one completion.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, EndpointError>;

    fn model(&self) -> &str {
        "unknown"
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, EndpointError> {
        (**self).complete(messages)
    }

    fn model(&self) -> &str {
        (**self).model()
    }
}

/// POSTs to `{endpoint}/chat/completions`.
pub struct HttpChatBackend {
    config: BackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpChatBackend {
    pub fn new(config: BackendConfig) -> Result<Self, EndpointError> {
        config.validate().map_err(EndpointError::InvalidRequest)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| EndpointError::Fatal(e.to_string()))?;
        let api_key = config.api_key_env.as_ref().and_then(|v| std::env::var(v).ok());
        Ok(Self { config, client, api_key })
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, EndpointError> {
        let msgs: Vec<_> = messages
            .iter()
            .map(|m| json!({ "role": m.role, "content": m.content }))
            .collect();
        let mut req = self
            .client
            .post(format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/')))
            .json(&json!({
                "model": self.config.model,
                "messages": msgs,
                "temperature": self.config.temperature,
                "max_tokens": self.config.max_tokens,
            }));
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                EndpointError::Timeout
            } else {
                EndpointError::Transient(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| EndpointError::Transient(e.to_string()))?;
        if !status.is_success() {
            return Err(EndpointError::from_status(status.as_u16(), text));
        }
        let body: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| EndpointError::Fatal(e.to_string()))?;
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| EndpointError::Fatal("response lacks choices[0].message.content".into()))
    }

    fn model(&self) -> &str {
        &self.config.model
    }
}

/// Append-only JSONL log of every request and response.
#[derive(Debug)]
pub struct Transcript {
    path: PathBuf,
    seq: Mutex<u64>,
}

#[derive(Serialize)]
struct TranscriptLine<'a> {
    seq: u64,
    model: &'a str,
    attempt: u32,
    request: &'a [ChatMessage],
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl Transcript {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        // Continue numbering after an existing transcript so resumed runs append.
        let seq = std::fs::read_to_string(&path).map(|t| t.lines().count() as u64).unwrap_or(0);
        Self { path, seq: Mutex::new(seq) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(
        &self,
        model: &str,
        attempt: u32,
        request: &[ChatMessage],
        outcome: &Result<String, EndpointError>,
    ) -> std::io::Result<()> {
        let mut seq = self.seq.lock().expect("transcript lock");
        let line = TranscriptLine {
            seq: *seq,
            model,
            attempt,
            request,
            response: outcome.as_ref().ok().map(String::as_str),
            error: outcome.as_ref().err().map(|e| e.to_string()),
        };
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        writeln!(f, "{}", serde_json::to_string(&line).expect("transcript line serializes"))?;
        *seq += 1;
        Ok(())
    }
}

/// A backend wrapped with retry/backoff and an optional transcript.
pub struct ChatClient {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    transcript: Option<Transcript>,
}

impl ChatClient {
    pub fn new(backend: Arc<dyn ChatBackend>, retry: RetryPolicy) -> Self {
        Self { backend, retry, transcript: None }
    }

    pub fn with_transcript(mut self, path: impl Into<PathBuf>) -> Self {
        self.transcript = Some(Transcript::new(path));
        self
    }

    pub fn transcript_path(&self) -> Option<&Path> {
        self.transcript.as_ref().map(Transcript::path)
    }
}

impl ChatBackend for ChatClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, EndpointError> {
        chat_complete(messages, self)
    }

    fn model(&self) -> &str {
        self.backend.model()
    }
}

/// One completion with retries on transient failures. Every attempt is
/// written to the client's transcript.
pub fn chat_complete(messages: &[ChatMessage], client: &ChatClient) -> Result<String, EndpointError> {
    if messages.is_empty() {
        return Err(EndpointError::InvalidRequest("no messages".into()));
    }
    for m in messages {
        m.validate().map_err(EndpointError::InvalidRequest)?;
    }
    let mut attempt = 0u32;
    loop {
        let outcome = client.backend.complete(messages);
        if let Some(t) = &client.transcript {
            if let Err(e) = t.append(client.backend.model(), attempt, messages, &outcome) {
                log::warn!("could not append to transcript {}: {e}", t.path.display());
            }
        }
        match outcome {
            Err(e) if e.is_retryable() && attempt < client.retry.max_retries => {
                let delay = client.retry.backoff_ms.saturating_mul(1u64 << attempt.min(16));
                if delay > 0 {
                    std::thread::sleep(Duration::from_millis(delay));
                }
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Replies with the content of the last user message.
#[derive(Clone, Debug, Default)]
pub struct EchoBackend;

impl ChatBackend for EchoBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, EndpointError> {
        messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.content.clone())
            .ok_or_else(|| EndpointError::InvalidRequest("no user message".into()))
    }

    fn model(&self) -> &str {
        "echo"
    }
}

/// Replays a fixed queue of replies; once drained, repeats the final entry.
#[derive(Debug)]
pub struct ScriptedBackend {
    replies: Mutex<VecDeque<Result<String, EndpointError>>>,
    last: Mutex<Option<Result<String, EndpointError>>>,
    calls: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_outcomes(replies.into_iter().map(|s| Ok(s.into())))
    }

    pub fn with_outcomes<I>(outcomes: I) -> Self
    where
        I: IntoIterator<Item = Result<String, EndpointError>>,
    {
        Self {
            replies: Mutex::new(outcomes.into_iter().collect()),
            last: Mutex::new(None),
            calls: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().expect("lock")
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, _messages: &[ChatMessage]) -> Result<String, EndpointError> {
        *self.calls.lock().expect("lock") += 1;
        let next = self.replies.lock().expect("lock").pop_front();
        let mut last = self.last.lock().expect("lock");
        match next {
            Some(r) => {
                *last = Some(r.clone());
                r
            }
            None => last
                .clone()
                .unwrap_or_else(|| Err(EndpointError::Fatal("script is empty".into()))),
        }
    }

    fn model(&self) -> &str {
        "scripted"
    }
}

/// A backend defined by a closure over the request.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&[ChatMessage]) -> Result<String, EndpointError> + Send + Sync,
{
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, EndpointError> {
        (self.0)(messages)
    }

    fn model(&self) -> &str {
        "fn"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn no_wait(max_retries: u32) -> RetryPolicy {
        RetryPolicy { max_retries, backoff_ms: 0 }
    }

    #[test]
    fn echo_round_trip() {
        let client = ChatClient::new(Arc::new(EchoBackend), no_wait(0));
        let out = chat_complete(&[ChatMessage::system("s"), ChatMessage::user("hello")], &client).unwrap();
        assert_eq!(out, "hello");
        assert!(matches!(chat_complete(&[], &client), Err(EndpointError::InvalidRequest(_))));
    }

    #[test]
    fn timeouts_exhaust_retries() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let backend = FnBackend(move |_: &[ChatMessage]| {
            c.fetch_add(1, Ordering::SeqCst);
            Err(EndpointError::Timeout)
        });
        let client = ChatClient::new(Arc::new(backend), no_wait(2));
        assert_eq!(chat_complete(&[ChatMessage::user("x")], &client), Err(EndpointError::Timeout));
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn transient_then_success() {
        let backend = ScriptedBackend::with_outcomes([
            Err(EndpointError::Transient("503".into())),
            Ok("fine".into()),
        ]);
        let client = ChatClient::new(Arc::new(backend), no_wait(3));
        assert_eq!(chat_complete(&[ChatMessage::user("x")], &client).unwrap(), "fine");
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let backend = Arc::new(ScriptedBackend::with_outcomes([Err(EndpointError::Fatal("400".into()))]));
        let client = ChatClient::new(backend.clone(), no_wait(3));
        assert!(chat_complete(&[ChatMessage::user("x")], &client).is_err());
        assert_eq!(backend.calls(), 1);
    }

    #[test]
    fn transcript_records_exchange() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("transcripts/researcher.jsonl");
        let client = ChatClient::new(Arc::new(EchoBackend), no_wait(0)).with_transcript(&path);
        chat_complete(&[ChatMessage::user("ping")], &client).unwrap();
        chat_complete(&[ChatMessage::user("pong")], &client).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0]["seq"], 0);
        assert_eq!(lines[0]["request"][0]["content"], "ping");
        assert_eq!(lines[1]["response"], "pong");
    }

    #[test]
    fn backend_config_validation() {
        let mut c = BackendConfig {
            endpoint: "http://localhost:1/v1".into(),
            model: "m".into(),
            temperature: 0.0,
            max_tokens: 10,
            retry: RetryPolicy::default(),
            timeout_secs: 1.0,
            api_key_env: None,
        };
        assert!(c.validate().is_ok());
        c.timeout_secs = 0.0;
        assert!(c.validate().is_err());
    }
}
