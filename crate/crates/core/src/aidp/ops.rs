//! The operator functions. Each takes a handle and returns a new one; none of
//! them mutate their input.

use std::collections::{BTreeMap, HashSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::endpoint::{EmbeddingEndpoint, LogprobEndpoint, RemoteError, RemoteSource};
use super::{
    load_local_dataset, AidpError, DatasetFormat, DatasetHandle, Entry, Message, MetaValue,
    Record, Role, TextField,
};
use crate::agents::chat::{ChatBackend, ChatMessage, EndpointError};

/// Model calls per record before a scorer or generator gives up on parsing.
pub const MAX_PARSE_ATTEMPTS: usize = 3;

fn endpoint_err(e: EndpointError) -> AidpError {
    AidpError::Endpoint(e.to_string())
}

/// Retrieves a hosted dataset through the remote source (the job bridge in
/// production) and loads the exported JSONL.
pub fn load_remote_dataset(
    source: &dyn RemoteSource,
    source_id: &str,
    split: Option<&str>,
) -> Result<DatasetHandle, AidpError> {
    let path = source.export(source_id, split).map_err(|e| match e {
        RemoteError::UnknownSource(s) => AidpError::UnknownSource(s),
        RemoteError::SplitRequired(m) => AidpError::Schema(m),
        RemoteError::Unavailable(m) => AidpError::BridgeUnavailable(m),
        RemoteError::Failed(m) => AidpError::Endpoint(m),
    })?;
    let mut ds = load_local_dataset(&path, DatasetFormat::Jsonl)?;
    ds.provenance = vec![super::OpDescriptor {
        op: "load_remote_dataset".into(),
        params: json!({ "source_id": source_id, "split": split }),
    }];
    Ok(ds)
}

/// Adds `meta.perplexity = exp(-mean token logprob)` to every record.
pub fn compute_perplexity(
    ds: &DatasetHandle,
    endpoint: &dyn LogprobEndpoint,
    field: &TextField,
) -> Result<DatasetHandle, AidpError> {
    let mut entries = Vec::with_capacity(ds.len());
    for e in &ds.entries {
        let text = field.extract(&e.record)?;
        if text.is_empty() {
            return Err(AidpError::Schema(format!("record {} has empty {field}", e.index)));
        }
        let lps = endpoint.token_logprobs(&text).map_err(endpoint_err)?;
        if lps.is_empty() {
            return Err(AidpError::Schema(format!("no token logprobs for record {}", e.index)));
        }
        let mean = lps.iter().sum::<f64>() / lps.len() as f64;
        let mut record = e.record.clone();
        record.meta.insert("perplexity".into(), MetaValue::Float((-mean).exp()));
        entries.push(Entry { index: e.index, record });
    }
    Ok(ds.derive(entries, "compute_perplexity", json!({ "field": field.to_string() })))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeRubric {
    pub instructions: String,
    #[serde(default = "default_judge_field")]
    pub field: String,
    pub min: f64,
    pub max: f64,
}

fn default_judge_field() -> String {
    "all".into()
}

/// First number in `reply` (a trailing `/N` is ignored) if it lies in
/// `[min, max]`.
pub fn parse_judge_score(reply: &str, min: f64, max: f64) -> Option<f64> {
    let mut chars = reply.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let negative_start = c == '-' && chars.peek().is_some_and(|(_, n)| n.is_ascii_digit());
        if c.is_ascii_digit() || negative_start {
            let mut end = i + c.len_utf8();
            while let Some(&(j, d)) = chars.peek() {
                if d.is_ascii_digit() || d == '.' {
                    end = j + d.len_utf8();
                    chars.next();
                } else {
                    break;
                }
            }
            let v: f64 = reply[i..end].trim_end_matches('.').parse().ok()?;
            return (v >= min && v <= max).then_some(v);
        }
    }
    None
}

/// LLM-as-judge scoring. Sets `meta.judge_score`, or `meta.judge_error` when no
/// parseable score came back after [`MAX_PARSE_ATTEMPTS`] calls.
pub fn score_dataset_with_llm(
    ds: &DatasetHandle,
    rubric: &JudgeRubric,
    backend: &dyn ChatBackend,
) -> Result<DatasetHandle, AidpError> {
    if !(rubric.min < rubric.max) {
        return Err(AidpError::Schema("judge scale needs min < max".into()));
    }
    let field = TextField::parse(&rubric.field)?;
    let system = ChatMessage::system(
        "You are a strict data-quality judge. Reply with a single numeric score.",
    );
    let mut entries = Vec::with_capacity(ds.len());
    for e in &ds.entries {
        let text = field.extract(&e.record)?;
        let prompt = format!(
            "{}\nScore on a scale from {} to {}. Reply with the score only, e.g. \"{}/{}\".\n\n---\n{}",
            rubric.instructions, rubric.min, rubric.max, rubric.max, rubric.max, text
        );
        let messages = [system.clone(), ChatMessage::user(prompt)];
        let mut score = None;
        let mut last_reply = String::new();
        for _ in 0..MAX_PARSE_ATTEMPTS {
            let reply = backend.complete(&messages).map_err(endpoint_err)?;
            if let Some(s) = parse_judge_score(&reply, rubric.min, rubric.max) {
                score = Some(s);
                break;
            }
            last_reply = reply;
        }
        let mut record = e.record.clone();
        record.meta.remove("judge_error");
        match score {
            Some(s) if s.fract() == 0.0 && s.abs() < 1e15 => {
                record.meta.insert("judge_score".into(), MetaValue::Int(s as i64));
            }
            Some(s) => {
                record.meta.insert("judge_score".into(), MetaValue::Float(s));
            }
            None => {
                record.meta.remove("judge_score");
                record.meta.insert(
                    "judge_error".into(),
                    MetaValue::Text(format!(
                        "unparseable reply after {MAX_PARSE_ATTEMPTS} attempts: {}",
                        crate::util::clip(&last_reply, 120)
                    )),
                );
            }
        }
        entries.push(Entry { index: e.index, record });
    }
    Ok(ds.derive(
        entries,
        "score_dataset_with_llm",
        json!({ "field": rubric.field, "min": rubric.min, "max": rubric.max }),
    ))
}

/// Stores `meta.embedding` for every record. All vectors must share one
/// dimension.
pub fn generate_text_embeddings(
    ds: &DatasetHandle,
    endpoint: &dyn EmbeddingEndpoint,
    field: &TextField,
    batch_size: usize,
) -> Result<DatasetHandle, AidpError> {
    let batch_size = batch_size.max(1);
    let mut dim: Option<usize> = None;
    let mut entries = Vec::with_capacity(ds.len());
    for chunk in ds.entries.chunks(batch_size) {
        let texts = chunk.iter().map(|e| field.extract(&e.record)).collect::<Result<Vec<_>, _>>()?;
        let vectors = endpoint.embed(&texts).map_err(endpoint_err)?;
        if vectors.len() != chunk.len() {
            return Err(AidpError::Schema(format!(
                "endpoint returned {} vectors for {} texts",
                vectors.len(),
                chunk.len()
            )));
        }
        for (e, v) in chunk.iter().zip(vectors) {
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => {
                    return Err(AidpError::Schema(format!(
                        "embedding dimension mismatch: {d} vs {} at record {}",
                        v.len(),
                        e.index
                    )))
                }
                _ => {}
            }
            let mut record = e.record.clone();
            record.meta.insert("embedding".into(), MetaValue::Vector(v));
            entries.push(Entry { index: e.index, record });
        }
    }
    Ok(ds.derive(entries, "generate_text_embeddings", json!({ "field": field.to_string() })))
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

#[derive(Clone, Debug, PartialEq)]
enum TemplatePart {
    Literal(String),
    Field(TextField),
}

/// Parses `{user}`, `{assistant}`, `{system}`, `{all}` and `{meta.key}`
/// placeholders. A template needs at least one.
fn parse_template(template: &str) -> Result<Vec<TemplatePart>, AidpError> {
    let mut parts = Vec::new();
    let mut rest = template;
    let mut placeholders = 0;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .map(|c| open + c)
            .ok_or_else(|| AidpError::Schema("unterminated placeholder in template".into()))?;
        if open > 0 {
            parts.push(TemplatePart::Literal(rest[..open].to_string()));
        }
        let name = &rest[open + 1..close];
        parts.push(TemplatePart::Field(TextField::parse(name).map_err(|_| {
            AidpError::Schema(format!("unknown placeholder `{{{name}}}` in template"))
        })?));
        placeholders += 1;
        rest = &rest[close + 1..];
    }
    if !rest.is_empty() {
        parts.push(TemplatePart::Literal(rest.to_string()));
    }
    if placeholders == 0 {
        return Err(AidpError::Schema("template has no placeholder".into()));
    }
    Ok(parts)
}

fn fill_template(parts: &[TemplatePart], record: &Record) -> Result<String, AidpError> {
    let mut out = String::new();
    for p in parts {
        match p {
            TemplatePart::Literal(s) => out.push_str(s),
            TemplatePart::Field(f) => out.push_str(&f.extract(record)?),
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct GeneratedPair {
    #[serde(default)]
    system: Option<String>,
    instruction: String,
    response: String,
}

fn parse_generated(reply: &str) -> Option<GeneratedPair> {
    let body = crate::agents::plan::extract_fenced(reply, &["json", ""]).unwrap_or(reply);
    let start = body.find('{')?;
    let end = body.rfind('}')?;
    let pair: GeneratedPair = serde_json::from_str(&body[start..=end]).ok()?;
    (!pair.instruction.trim().is_empty() && !pair.response.trim().is_empty()).then_some(pair)
}

/// Synthesizes `n` instruction-response records, cycling through the seed
/// records in order. The model must answer with a JSON object
/// `{"instruction": ..., "response": ...}`.
pub fn generate_dataset_with_llm(
    seed: &DatasetHandle,
    prompt_template: &str,
    backend: &dyn ChatBackend,
    n: usize,
) -> Result<DatasetHandle, AidpError> {
    let parts = parse_template(prompt_template)?;
    if n > 0 && seed.is_empty() {
        return Err(AidpError::Schema("cannot generate from an empty seed dataset".into()));
    }
    let system = ChatMessage::system(
        "You write training examples. Reply with a JSON object containing \"instruction\" and \"response\".",
    );
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let source = &seed.entries[i % seed.len()];
        let prompt = fill_template(&parts, &source.record)?;
        let messages = [system.clone(), ChatMessage::user(prompt)];
        let mut pair = None;
        for _ in 0..MAX_PARSE_ATTEMPTS {
            let reply = backend.complete(&messages).map_err(endpoint_err)?;
            if let Some(p) = parse_generated(&reply) {
                pair = Some(p);
                break;
            }
        }
        let pair = pair.ok_or_else(|| {
            AidpError::Schema(format!(
                "generation {i} did not return an instruction/response object after {MAX_PARSE_ATTEMPTS} attempts"
            ))
        })?;
        let mut messages = Vec::new();
        let sys = pair.system.unwrap_or_else(|| source.record.role_text(Role::System));
        if !sys.is_empty() {
            messages.push(Message::new(Role::System, sys));
        }
        messages.push(Message::new(Role::User, pair.instruction));
        messages.push(Message::new(Role::Assistant, pair.response));
        let mut meta = BTreeMap::new();
        meta.insert("seed_index".into(), MetaValue::Int(source.index as i64));
        records.push(Record { messages, chosen: None, rejected: None, meta });
    }
    let entries = records.into_iter().enumerate().map(|(index, record)| Entry { index, record }).collect();
    Ok(seed.derive(entries, "generate_dataset_with_llm", json!({ "template": prompt_template, "n": n })))
}

/// Comparator over a numeric meta field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingRule {
    pub key: String,
    #[serde(default = "default_true")]
    pub higher_is_better: bool,
}

fn default_true() -> bool {
    true
}

/// Builds `{prompt, chosen, rejected}` records. Records sharing the same
/// system+user messages form a group; within a group the entries are sorted
/// best first (ties by lower original index) and the first and last become
/// chosen and rejected. Singleton groups are skipped. Groups are emitted in
/// order of first appearance.
pub fn generate_preference_dataset(
    ds: &DatasetHandle,
    rule: &RankingRule,
) -> Result<DatasetHandle, AidpError> {
    let mut order: Vec<Vec<Message>> = Vec::new();
    let mut groups: BTreeMap<usize, Vec<(f64, &Entry)>> = BTreeMap::new();
    for e in &ds.entries {
        let prompt: Vec<Message> =
            e.record.messages.iter().filter(|m| m.role != Role::Assistant).cloned().collect();
        let score = e
            .record
            .meta
            .get(&rule.key)
            .and_then(MetaValue::as_f64)
            .filter(|s| !s.is_nan())
            .ok_or_else(|| AidpError::Schema(format!("record {} lacks numeric meta.{}", e.index, rule.key)))?;
        let slot = match order.iter().position(|p| *p == prompt) {
            Some(s) => s,
            None => {
                order.push(prompt);
                order.len() - 1
            }
        };
        groups.entry(slot).or_default().push((score, e));
    }
    let mut entries = Vec::new();
    for (slot, mut members) in groups {
        if members.len() < 2 {
            continue;
        }
        members.sort_by(|a, b| {
            let ord = if rule.higher_is_better { b.0.total_cmp(&a.0) } else { a.0.total_cmp(&b.0) };
            ord.then(a.1.index.cmp(&b.1.index))
        });
        let (best_score, best) = members[0];
        let (worst_score, worst) = members[members.len() - 1];
        let answer = |r: &Record| Message::new(Role::Assistant, r.role_text(Role::Assistant));
        let mut meta = BTreeMap::new();
        meta.insert("chosen_index".into(), MetaValue::Int(best.index as i64));
        meta.insert("chosen_score".into(), MetaValue::Float(best_score));
        meta.insert("rejected_index".into(), MetaValue::Int(worst.index as i64));
        meta.insert("rejected_score".into(), MetaValue::Float(worst_score));
        let record = Record {
            messages: order[slot].clone(),
            chosen: Some(answer(&best.record)),
            rejected: Some(answer(&worst.record)),
            meta,
        };
        entries.push(Entry { index: best.index, record });
    }
    Ok(ds.derive(
        entries,
        "generate_preference_dataset",
        json!({ "key": rule.key, "higher_is_better": rule.higher_is_better }),
    ))
}

pub fn text_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

/// Keeps the first occurrence of every exact SHA-256 of `field`.
pub fn deduplicate_by_text_hash(ds: &DatasetHandle, field: &TextField) -> Result<DatasetHandle, AidpError> {
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for e in &ds.entries {
        if seen.insert(text_hash(&field.extract(&e.record)?)) {
            entries.push(e.clone());
        }
    }
    Ok(ds.derive(entries, "deduplicate_by_text_hash", json!({ "field": field.to_string() })))
}

/// Declarative predicates for `select_by_filter` inside pipeline specs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    Const { value: bool },
    MinChars { field: String, n: usize },
    MaxChars { field: String, n: usize },
    Contains { field: String, text: String },
    HasMeta { key: String },
    /// `min <= meta[key] < max`, or `<= max` with `max_inclusive`.
    MetaRange {
        key: String,
        #[serde(default)]
        min: Option<f64>,
        #[serde(default)]
        max: Option<f64>,
        #[serde(default)]
        max_inclusive: bool,
    },
    Not { inner: Box<Predicate> },
    All { of: Vec<Predicate> },
    Any { of: Vec<Predicate> },
}

impl Predicate {
    /// Parses field names up front so evaluation cannot fail on them.
    pub fn check(&self) -> Result<(), AidpError> {
        match self {
            Predicate::MinChars { field, .. }
            | Predicate::MaxChars { field, .. }
            | Predicate::Contains { field, .. } => TextField::parse(field).map(|_| ()),
            Predicate::Not { inner } => inner.check(),
            Predicate::All { of } | Predicate::Any { of } => of.iter().try_for_each(Predicate::check),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, r: &Record) -> bool {
        let text = |f: &str| TextField::parse(f).and_then(|f| f.extract(r)).ok();
        match self {
            Predicate::Const { value } => *value,
            Predicate::MinChars { field, n } => text(field).is_some_and(|t| t.chars().count() >= *n),
            Predicate::MaxChars { field, n } => text(field).is_some_and(|t| t.chars().count() <= *n),
            Predicate::Contains { field, text: needle } => text(field).is_some_and(|t| t.contains(needle.as_str())),
            Predicate::HasMeta { key } => r.meta.contains_key(key),
            Predicate::MetaRange { key, min, max, max_inclusive } => {
                match r.meta.get(key).and_then(MetaValue::as_f64) {
                    Some(v) => {
                        min.map_or(true, |lo| v >= lo)
                            && max.map_or(true, |hi| if *max_inclusive { v <= hi } else { v < hi })
                    }
                    None => false,
                }
            }
            Predicate::Not { inner } => !inner.eval(r),
            Predicate::All { of } => of.iter().all(|p| p.eval(r)),
            Predicate::Any { of } => of.iter().any(|p| p.eval(r)),
        }
    }
}

/// Keeps records for which `predicate` holds, in input order.
pub fn select_by_filter<P>(ds: &DatasetHandle, predicate: P) -> DatasetHandle
where
    P: Fn(&Record) -> bool,
{
    let entries = ds.entries.iter().filter(|e| predicate(&e.record)).cloned().collect();
    ds.derive(entries, "select_by_filter", serde_json::Value::Null)
}

pub fn select_by_predicate(ds: &DatasetHandle, predicate: &Predicate) -> Result<DatasetHandle, AidpError> {
    predicate.check()?;
    let mut out = select_by_filter(ds, |r| predicate.eval(r));
    if let Some(last) = out.provenance.last_mut() {
        last.params = serde_json::to_value(predicate).expect("predicates serialize");
    }
    Ok(out)
}

/// Top-`k` records by `meta[score_field]`, ties to the lower original index,
/// returned in input order.
pub fn select_by_score(ds: &DatasetHandle, score_field: &str, k: usize) -> Result<DatasetHandle, AidpError> {
    let mut ranked = Vec::with_capacity(ds.len());
    for (pos, e) in ds.entries.iter().enumerate() {
        let s = e
            .record
            .meta
            .get(score_field)
            .and_then(MetaValue::as_f64)
            .filter(|s| !s.is_nan())
            .ok_or_else(|| AidpError::Schema(format!("record {} lacks numeric meta.{score_field}", e.index)))?;
        ranked.push((s, e.index, pos));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut keep: Vec<usize> = ranked.into_iter().take(k).map(|(_, _, pos)| pos).collect();
    keep.sort_unstable();
    let entries = keep.into_iter().map(|p| ds.entries[p].clone()).collect();
    Ok(ds.derive(entries, "select_by_score", json!({ "score_field": score_field, "k": k })))
}

/// Uniform sample of `min(n, len)` records without replacement, returned in
/// input order.
///
/// Positions are drawn by a partial Fisher-Yates shuffle driven by ChaCha8
/// seeded with `seed` via `seed_from_u64`: for `i` in `0..n`, swap position
/// `i` with `i + next_u64() % (len - i)`.
pub fn select_by_random(ds: &DatasetHandle, n: usize, seed: u64) -> DatasetHandle {
    let len = ds.len();
    let n = n.min(len);
    let mut pos: Vec<usize> = (0..len).collect();
    let mut rng = crate::seed::seeded(seed);
    for i in 0..n {
        let j = i + (rng.next_u64() % (len - i) as u64) as usize;
        pos.swap(i, j);
    }
    let mut keep = pos[..n].to_vec();
    keep.sort_unstable();
    let entries = keep.into_iter().map(|p| ds.entries[p].clone()).collect();
    let mut out = ds.derive(entries, "select_by_random", json!({ "n": n, "seed": seed }));
    out.seeds.push(seed);
    out
}

/// Appends handles in argument order and renumbers the result.
pub fn concatenate(inputs: &[&DatasetHandle]) -> DatasetHandle {
    let mut provenance = Vec::new();
    let mut seeds = Vec::new();
    let mut entries = Vec::new();
    for ds in inputs {
        provenance.extend(ds.provenance.iter().cloned());
        seeds.extend(ds.seeds.iter().copied());
        entries.extend(ds.records().cloned());
    }
    let entries = entries.into_iter().enumerate().map(|(index, record)| Entry { index, record }).collect();
    let base = DatasetHandle { entries: Vec::new(), provenance, seeds };
    base.derive(entries, "concatenate", json!({ "inputs": inputs.len() }))
}

/// Rewrites every record's messages from templates over its current fields
/// and meta. Meta is kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageTemplates {
    #[serde(default)]
    pub system: Option<String>,
    pub user: String,
    pub assistant: String,
}

pub fn format_messages(ds: &DatasetHandle, templates: &MessageTemplates) -> Result<DatasetHandle, AidpError> {
    // A system template may be a fixed string.
    let system = match &templates.system {
        Some(s) if s.contains('{') => Some(parse_template(s)?),
        Some(s) => Some(vec![TemplatePart::Literal(s.clone())]),
        None => None,
    };
    let literal_or = |t: &str| -> Result<Vec<TemplatePart>, AidpError> {
        if t.contains('{') {
            parse_template(t)
        } else {
            Ok(vec![TemplatePart::Literal(t.to_string())])
        }
    };
    let user = literal_or(&templates.user)?;
    let assistant = literal_or(&templates.assistant)?;
    let mut entries = Vec::with_capacity(ds.len());
    for e in &ds.entries {
        let mut messages = Vec::new();
        if let Some(s) = &system {
            messages.push(Message::new(Role::System, fill_template(s, &e.record)?));
        }
        messages.push(Message::new(Role::User, fill_template(&user, &e.record)?));
        messages.push(Message::new(Role::Assistant, fill_template(&assistant, &e.record)?));
        let record = Record { messages, chosen: None, rejected: None, meta: e.record.meta.clone() };
        entries.push(Entry { index: e.index, record });
    }
    Ok(ds.derive(entries, "format_messages", serde_json::to_value(templates).expect("serializes")))
}
