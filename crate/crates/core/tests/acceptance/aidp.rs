use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use arbor_core::agents::chat::{ChatMessage, EndpointError, FnBackend};
use arbor_core::aidp::endpoint::{EmbeddingEndpoint, LogprobEndpoint, RemoteError, RemoteSource};
use arbor_core::aidp::ops::{deduplicate_by_text_hash, select_by_score};
use arbor_core::aidp::pipeline::{run_pipeline, OpEnv, OperatorRegistry, PipelineSpec, PipelineStep};
use arbor_core::aidp::{DatasetHandle, MetaValue, Record, TextField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::{ensure, Outcome};

const CORPORA: u64 = 100;
const MAX_RECORDS: usize = 10_000;
/// Records per corpus fed through the full pipeline, which calls the mocks
/// once or more per record.
const PIPELINE_RECORDS: usize = 120;

/// A corpus with repeated prompts, exact duplicates and quantized scores so
/// that grouping, dedup and tie-breaking all get exercised.
fn corpus(seed: u64, n: usize) -> Vec<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Record> = Vec::with_capacity(n);
    while out.len() < n {
        if !out.is_empty() && rng.gen_bool(0.1) {
            let dup = out[rng.gen_range(0..out.len())].clone();
            out.push(dup);
            continue;
        }
        let prompt = rng.gen_range(0..(n / 3).max(1));
        let mut r = Record::chat(format!("question {prompt}: explain step {}", prompt % 17), format!("answer variant {}", rng.gen_range(0..1_000_000)));
        r.meta.insert("s".into(), MetaValue::Float(rng.gen_range(0..50) as f64 / 10.0));
        out.push(r);
    }
    out
}

struct Logprobs;

impl LogprobEndpoint for Logprobs {
    fn token_logprobs(&self, text: &str) -> Result<Vec<f64>, EndpointError> {
        Ok(text.split_whitespace().map(|w| -0.1 * (w.len() % 9) as f64 - 0.05).collect())
    }
}

struct Embeddings;

impl EmbeddingEndpoint for Embeddings {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EndpointError> {
        Ok(texts
            .iter()
            .map(|t| {
                let mut v = vec![0.0; 4];
                for (i, b) in t.bytes().enumerate() {
                    v[i % 4] += b as f64 / 255.0;
                }
                v
            })
            .collect())
    }
}

struct Remote {
    dir: PathBuf,
    seed: u64,
}

impl RemoteSource for Remote {
    fn export(&self, source_id: &str, split: Option<&str>) -> Result<PathBuf, RemoteError> {
        let path = self.dir.join(format!("datasets/remote/{}-{}.jsonl", source_id.replace('/', "_"), split.unwrap_or("train")));
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| RemoteError::Failed(e.to_string()))?;
        DatasetHandle::from_records(corpus(self.seed ^ 0xABCD, 40)).write_jsonl(&path).map_err(|e| RemoteError::Failed(e.to_string()))?;
        Ok(path)
    }
}

/// Judge replies derive from the prompt length; generation replies echo a
/// digest of the prompt as a JSON pair.
fn chat(messages: &[ChatMessage]) -> Result<String, EndpointError> {
    let prompt: String = messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n");
    if prompt.contains("\"instruction\"") {
        let n = prompt.len();
        Ok(format!("```json\n{{\"instruction\": \"rewrite #{n}\", \"response\": \"done in {} words\"}}\n```", n % 50))
    } else {
        Ok(format!("Score: {}/5", 1 + prompt.len() % 5))
    }
}

fn step(op: &str, inputs: &[&str], output: &str, params: Value) -> PipelineStep {
    PipelineStep { op: op.into(), inputs: inputs.iter().map(|s| s.to_string()).collect(), output: output.into(), params }
}

/// Exercises every registered operator.
fn full_spec(seed: u64) -> PipelineSpec {
    let steps = vec![
        step("load_local_dataset", &[], "local", json!({"path": "datasets/base.jsonl"})),
        step("load_remote_dataset", &[], "remote", json!({"source_id": "hub/extra", "split": "train"})),
        step("concatenate", &["local", "remote"], "both", Value::Null),
        step("deduplicate_by_text_hash", &["both"], "dedup", json!({"field": "all"})),
        step("compute_perplexity", &["dedup"], "ppl", json!({"field": "assistant"})),
        step("score_dataset_with_llm", &["ppl"], "judged", json!({"instructions": "Rate helpfulness.", "min": 1.0, "max": 5.0})),
        step("generate_text_embeddings", &["judged"], "embedded", json!({"field": "user", "batch_size": 7})),
        step("select_by_filter", &["embedded"], "long", json!({"predicate": {"kind": "min_chars", "field": "user", "n": 12}})),
        step("select_by_score", &["long"], "top", json!({"score_field": "judge_score", "k": 30})),
        step("select_by_random", &["long"], "sample", json!({"n": 25})),
        step("generate_dataset_with_llm", &["sample"], "synthetic", json!({"template": "Write a harder variant of: {user}", "n": 9})),
        step("generate_preference_dataset", &["judged"], "prefs", json!({"key": "perplexity", "higher_is_better": false})),
        step("format_messages", &["top"], "formatted", json!({"system": "Answer briefly.", "user": "Q: {user}", "assistant": "{assistant}"})),
    ];
    let outputs = ["top", "sample", "synthetic", "prefs", "formatted", "embedded"].iter().map(|s| (s.to_string(), s.to_string())).collect();
    PipelineSpec { seed, steps, outputs }
}

fn run_once(records: &[Record], seed: u64) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = dir.path().join("datasets/base.jsonl");
    std::fs::create_dir_all(base.parent().unwrap()).map_err(|e| e.to_string())?;
    DatasetHandle::from_records(records.to_vec()).write_jsonl(&base).map_err(|e| e.to_string())?;
    let env = OpEnv::new(dir.path())
        .with_chat(Arc::new(FnBackend(chat)))
        .with_logprob(Arc::new(Logprobs))
        .with_embedding(Arc::new(Embeddings))
        .with_remote(Arc::new(Remote { dir: dir.path().to_path_buf(), seed }));
    let out = run_pipeline(&full_spec(seed), &OperatorRegistry::with_builtins(), &env, 50_000).map_err(|e| e.to_string())?;
    out.files.iter().map(|(k, p)| Ok((k.clone(), read(p)?))).collect()
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn dedup_reference(records: &[Record]) -> Vec<Record> {
    let field = TextField::parse("all").unwrap();
    let mut seen = HashSet::new();
    records.iter().filter(|r| seen.insert(field.extract(r).unwrap())).cloned().collect()
}

/// Full stable sort by score (descending), ties to the earlier record, then
/// the first k restored to input order.
fn top_k_reference(records: &[Record], k: usize) -> Vec<Record> {
    let mut idx: Vec<usize> = (0..records.len()).collect();
    let score = |i: usize| records[i].meta["s"].as_f64().unwrap();
    idx.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap().then(a.cmp(&b)));
    let mut keep = idx[..k.min(idx.len())].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| records[i].clone()).collect()
}

pub fn check() -> Outcome {
    let registry = OperatorRegistry::with_builtins();
    let used: HashSet<String> = full_spec(0).steps.iter().map(|s| s.op.clone()).collect();
    for name in registry.names() {
        ensure!(used.contains(name), "operator {name} is not covered");
    }
    let field = TextField::parse("all").unwrap();
    let mut total = 0;
    for c in 0..CORPORA {
        let mut rng = ChaCha8Rng::seed_from_u64(c);
        let n = if c % 10 == 0 { MAX_RECORDS } else { rng.gen_range(0..=MAX_RECORDS / 4) };
        let records = corpus(c, n);
        total += records.len();

        let ds = DatasetHandle::from_records(records.clone());
        let once = deduplicate_by_text_hash(&ds, &field).map_err(|e| e.to_string())?;
        let twice = deduplicate_by_text_hash(&once, &field).map_err(|e| e.to_string())?;
        ensure!(once.to_jsonl() == twice.to_jsonl(), "corpus {c}: dedup is not idempotent");
        ensure!(once.to_jsonl() == DatasetHandle::from_records(dedup_reference(&records)).to_jsonl(), "corpus {c}: dedup differs from first-occurrence reference");

        for k in [0, 1, n / 7, n / 2, n, n + 5] {
            let got = select_by_score(&ds, "s", k).map_err(|e| e.to_string())?;
            let want = DatasetHandle::from_records(top_k_reference(&records, k));
            ensure!(got.to_jsonl() == want.to_jsonl(), "corpus {c}: select_by_score k={k} differs from full sort");
        }

        let small = &records[..records.len().min(PIPELINE_RECORDS)];
        if small.is_empty() {
            continue;
        }
        let a = run_once(small, c)?;
        let b = run_once(small, c)?;
        ensure!(a.len() == 6, "corpus {c}: expected 6 outputs, got {}", a.len());
        for (name, bytes) in &a {
            ensure!(b.get(name) == Some(bytes), "corpus {c}: output {name} differs between identical runs");
        }
    }
    Ok(format!(
        "{CORPORA} corpora ({total} records); all {} operators byte-identical across reruns",
        registry.names().count()
    ))
}
