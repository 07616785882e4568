//! Deterministic dataset operators over chat-record JSONL corpora.
//!
//! Records are one JSON object per line:
//!
//! ```text
//! {"messages":[{"role":"user","content":"..."},{"role":"assistant","content":"..."}],"meta":{"judge_score":4}}
//! ```
//!
//! Preference pairs add `chosen` and `rejected` assistant messages next to the
//! prompt messages. Every operator preserves input order unless it documents
//! otherwise, and appends a descriptor to the handle's provenance.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod endpoint;
pub mod ops;
pub mod pipeline;

pub use endpoint::{EmbeddingEndpoint, LogprobEndpoint, RemoteError, RemoteSource};
pub use ops::*;
pub use pipeline::{
    run_pipeline, Operator, OperatorRegistry, OpEnv, PipelineOutput, PipelineSpec, PipelineStep,
};

#[derive(Debug, Error)]
pub enum AidpError {
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("endpoint error: {0}")]
    Endpoint(String),
    #[error("unknown source `{0}`")]
    UnknownSource(String),
    #[error("bridge unavailable: {0}")]
    BridgeUnavailable(String),
    #[error("output `{output}` has {count} records, cap is {cap}")]
    CapExceeded { output: String, count: usize, cap: usize },
    #[error("invalid pipeline: {0}")]
    InvalidSpec(String),
    #[error("step {index} ({op}) failed: {source}")]
    Step {
        index: usize,
        op: String,
        #[source]
        source: Box<AidpError>,
    },
}

impl AidpError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        AidpError::Io { path: path.to_path_buf(), source }
    }

    /// The failing step index when the error came out of a pipeline.
    pub fn step_index(&self) -> Option<usize> {
        match self {
            AidpError::Step { index, .. } => Some(*index),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
}

/// Metadata value attached to a record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetaValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
    Vector(Vec<f64>),
}

impl MetaValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            MetaValue::Int(i) => Some(*i as f64),
            MetaValue::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            MetaValue::Text(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for MetaValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetaValue::Bool(b) => write!(f, "{b}"),
            MetaValue::Int(i) => write!(f, "{i}"),
            MetaValue::Float(x) => write!(f, "{x}"),
            MetaValue::Text(s) => f.write_str(s),
            MetaValue::Vector(v) => write!(f, "{v:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub messages: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<Message>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, MetaValue>,
}

impl Record {
    pub fn chat(user: impl Into<String>, assistant: impl Into<String>) -> Self {
        Self {
            messages: vec![Message::new(Role::User, user), Message::new(Role::Assistant, assistant)],
            chosen: None,
            rejected: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.messages.is_empty() {
            return Err("record has no messages".into());
        }
        Ok(())
    }

    /// Concatenated content of the messages with `role`, newline separated.
    pub fn role_text(&self, role: Role) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == role)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records always serialize")
    }
}

/// Which part of a record an operator reads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TextField {
    Role(Role),
    /// Every message as `role: content` lines.
    All,
    Meta(String),
}

impl TextField {
    pub fn parse(s: &str) -> Result<Self, AidpError> {
        match s {
            "system" => Ok(TextField::Role(Role::System)),
            "user" => Ok(TextField::Role(Role::User)),
            "assistant" => Ok(TextField::Role(Role::Assistant)),
            "all" => Ok(TextField::All),
            _ => match s.strip_prefix("meta.") {
                Some(key) if !key.is_empty() => Ok(TextField::Meta(key.to_string())),
                _ => Err(AidpError::Schema(format!("unknown field `{s}`"))),
            },
        }
    }

    pub fn extract(&self, record: &Record) -> Result<String, AidpError> {
        match self {
            TextField::Role(r) => Ok(record.role_text(*r)),
            TextField::All => Ok(record
                .messages
                .iter()
                .map(|m| format!("{}: {}", m.role.as_str(), m.content))
                .collect::<Vec<_>>()
                .join("\n")),
            TextField::Meta(k) => record
                .meta
                .get(k)
                .map(|v| v.to_string())
                .ok_or_else(|| AidpError::Schema(format!("record lacks meta.{k}"))),
        }
    }
}

impl fmt::Display for TextField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TextField::Role(r) => f.write_str(r.as_str()),
            TextField::All => f.write_str("all"),
            TextField::Meta(k) => write!(f, "meta.{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpDescriptor {
    pub op: String,
    pub params: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    /// Position in the dataset this handle was loaded or generated from.
    pub index: usize,
    pub record: Record,
}

/// An ordered record sequence with stable original indices and the list of
/// operators that produced it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetHandle {
    pub entries: Vec<Entry>,
    pub provenance: Vec<OpDescriptor>,
    pub seeds: Vec<u64>,
}

impl DatasetHandle {
    pub fn from_records(records: Vec<Record>) -> Self {
        Self {
            entries: records
                .into_iter()
                .enumerate()
                .map(|(index, record)| Entry { index, record })
                .collect(),
            provenance: Vec::new(),
            seeds: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.entries.iter().map(|e| &e.record)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }

    /// Same lineage, new entries.
    pub(crate) fn derive(&self, entries: Vec<Entry>, op: &str, params: serde_json::Value) -> Self {
        let mut provenance = self.provenance.clone();
        provenance.push(OpDescriptor { op: op.to_string(), params });
        Self { entries, provenance, seeds: self.seeds.clone() }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.records() {
            out.push_str(&r.to_json_line());
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), AidpError> {
        crate::util::atomic_write(path, self.to_jsonl().as_bytes()).map_err(|e| AidpError::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    #[default]
    Jsonl,
    /// A single JSON array of records.
    Json,
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Record>, AidpError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line, i + 1)?);
    }
    Ok(out)
}

fn parse_line(line: &str, lineno: usize) -> Result<Record, AidpError> {
    let rec: Record = serde_json::from_str(line)
        .map_err(|e| AidpError::Schema(format!("line {lineno}: {e}")))?;
    rec.validate().map_err(|e| AidpError::Schema(format!("line {lineno}: {e}")))?;
    Ok(rec)
}

/// Imports a dataset from local storage.
pub fn load_local_dataset(path: &Path, format: DatasetFormat) -> Result<DatasetHandle, AidpError> {
    let file = std::fs::File::open(path).map_err(|e| AidpError::io(path, e))?;
    let records = match format {
        DatasetFormat::Jsonl => {
            let mut out = Vec::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| AidpError::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                out.push(parse_line(&line, i + 1)?);
            }
            out
        }
        DatasetFormat::Json => {
            let records: Vec<Record> = serde_json::from_reader(BufReader::new(file))
                .map_err(|e| AidpError::Schema(e.to_string()))?;
            for (i, r) in records.iter().enumerate() {
                r.validate().map_err(|e| AidpError::Schema(format!("record {i}: {e}")))?;
            }
            records
        }
    };
    let mut ds = DatasetHandle::from_records(records);
    ds.provenance.push(OpDescriptor {
        op: "load_local_dataset".into(),
        params: serde_json::json!({ "path": path.display().to_string(), "format": format }),
    });
    Ok(ds)
}
