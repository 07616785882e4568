//! Model endpoints and remote dataset sources used by the scoring and
//! generation operators. Every operator takes these as injected trait objects.

use std::path::PathBuf;
use std::time::Duration;

use serde_json::json;
use thiserror::Error;

use crate::agents::chat::EndpointError;

/// Per-token log-probabilities of a text under a language model.
pub trait LogprobEndpoint: Send + Sync {
    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, EndpointError>;
}

/// Dense embeddings for a batch of texts, one vector per input.
pub trait EmbeddingEndpoint: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EndpointError>;
}

#[derive(Debug, Error, PartialEq)]
pub enum RemoteError {
    #[error("unknown source `{0}`")]
    UnknownSource(String),
    #[error("{0}")]
    SplitRequired(String),
    #[error("bridge unavailable: {0}")]
    Unavailable(String),
    #[error("export failed: {0}")]
    Failed(String),
}

/// Exports a hosted dataset split into a local chat-record JSONL file.
pub trait RemoteSource: Send + Sync {
    fn export(&self, source_id: &str, split: Option<&str>) -> Result<PathBuf, RemoteError>;
}

fn http_client(timeout: Duration) -> Result<reqwest::blocking::Client, EndpointError> {
    reqwest::blocking::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| EndpointError::Fatal(e.to_string()))
}

fn classify(err: reqwest::Error) -> EndpointError {
    if err.is_timeout() {
        EndpointError::Timeout
    } else {
        EndpointError::Transient(err.to_string())
    }
}

/// Prompt log-probabilities from an OpenAI-compatible `/completions` endpoint
/// called with `echo: true, max_tokens: 0, logprobs: 0`.
#[derive(Clone, Debug)]
pub struct HttpLogprobEndpoint {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl LogprobEndpoint for HttpLogprobEndpoint {
    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, EndpointError> {
        let client = http_client(self.timeout)?;
        let mut req = client
            .post(format!("{}/completions", self.base_url.trim_end_matches('/')))
            .json(&json!({
                "model": self.model,
                "prompt": text,
                "max_tokens": 0,
                "echo": true,
                "logprobs": 0,
            }));
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(classify)?;
        let status = resp.status();
        let body: serde_json::Value = resp.json().map_err(classify)?;
        if !status.is_success() {
            return Err(EndpointError::from_status(status.as_u16(), body.to_string()));
        }
        let lps = body["choices"][0]["logprobs"]["token_logprobs"]
            .as_array()
            .ok_or_else(|| EndpointError::Fatal("response lacks token_logprobs".into()))?;
        // The first token has no conditional probability and comes back null.
        Ok(lps.iter().filter_map(|v| v.as_f64()).collect())
    }
}

/// OpenAI-compatible `/embeddings` endpoint.
#[derive(Clone, Debug)]
pub struct HttpEmbeddingEndpoint {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl EmbeddingEndpoint for HttpEmbeddingEndpoint {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EndpointError> {
        let client = http_client(self.timeout)?;
        let mut req = client
            .post(format!("{}/embeddings", self.base_url.trim_end_matches('/')))
            .json(&json!({ "model": self.model, "input": texts }));
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(classify)?;
        let status = resp.status();
        let body: serde_json::Value = resp.json().map_err(classify)?;
        if !status.is_success() {
            return Err(EndpointError::from_status(status.as_u16(), body.to_string()));
        }
        let data = body["data"]
            .as_array()
            .ok_or_else(|| EndpointError::Fatal("response lacks data".into()))?;
        let mut rows: Vec<(u64, Vec<f64>)> = data
            .iter()
            .map(|d| {
                let idx = d["index"].as_u64().unwrap_or(0);
                let v = d["embedding"]
                    .as_array()
                    .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
                    .unwrap_or_default();
                (idx, v)
            })
            .collect();
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}
