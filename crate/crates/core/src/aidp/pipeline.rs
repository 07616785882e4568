//! Pipeline specs and the runner that executes them against an operator
//! registry.
//!
//! A spec is a list of steps, each binding the result of one operator to a
//! name that later steps (and the terminal `outputs` map) may reference:
//!
//! ```json
//! {"seed": 7,
//!  "steps": [
//!    {"op": "load_local_dataset", "output": "raw", "params": {"path": "datasets/base.jsonl"}},
//!    {"op": "select_by_random", "inputs": ["raw"], "output": "sample", "params": {"n": 1000}}
//!  ],
//!  "outputs": {"train_v2": "sample"}}
//! ```
//!
//! Terminal outputs are written to `<workspace>/datasets/<name>.jsonl`.
//! Steps that draw random numbers and do not set their own `seed` parameter
//! use `derive_seed(spec.seed, "pipeline_step", [step index])`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::endpoint::{EmbeddingEndpoint, LogprobEndpoint, RemoteSource};
use super::ops::{self, JudgeRubric, MessageTemplates, Predicate, RankingRule};
use super::{AidpError, DatasetFormat, DatasetHandle, TextField};
use crate::agents::chat::ChatBackend;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineStep {
    pub op: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    pub output: String,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub params: Value,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub steps: Vec<PipelineStep>,
    /// Terminal output name to the binding it materializes.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

impl PipelineSpec {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty() && self.outputs.is_empty()
    }

    /// Workspace-relative path of a terminal output.
    pub fn output_path(name: &str) -> String {
        format!("datasets/{name}.jsonl")
    }

    pub fn output_paths(&self) -> BTreeSet<String> {
        self.outputs.keys().map(|n| Self::output_path(n)).collect()
    }

    pub fn step_seed(&self, index: usize) -> u64 {
        crate::seed::derive_seed(self.seed, "pipeline_step", &[index as u64])
    }

    /// Structural checks: known operators, arity, parameters, every input
    /// bound by an earlier step, bindings never reassigned, outputs valid.
    pub fn validate(&self, registry: &OperatorRegistry) -> Result<(), AidpError> {
        let mut bound = BTreeSet::new();
        for (i, step) in self.steps.iter().enumerate() {
            let at = |msg: String| AidpError::InvalidSpec(format!("step {i} ({}): {msg}", step.op));
            let op = registry.get(&step.op).ok_or_else(|| at("unknown operator".into()))?;
            if !op.arity().accepts(step.inputs.len()) {
                return Err(at(format!("takes {} inputs, got {}", op.arity(), step.inputs.len())));
            }
            for input in &step.inputs {
                if !bound.contains(input.as_str()) {
                    return Err(at(format!("input `{input}` is not bound by an earlier step")));
                }
            }
            if step.output.trim().is_empty() {
                return Err(at("empty output binding".into()));
            }
            if !bound.insert(step.output.as_str()) {
                return Err(at(format!("binding `{}` is assigned twice", step.output)));
            }
            op.check_params(&step.params).map_err(|e| at(e.to_string()))?;
        }
        for (name, binding) in &self.outputs {
            if !valid_output_name(name) {
                return Err(AidpError::InvalidSpec(format!("invalid output name `{name}`")));
            }
            if !bound.contains(binding.as_str()) {
                return Err(AidpError::InvalidSpec(format!(
                    "output `{name}` refers to unknown binding `{binding}`"
                )));
            }
        }
        Ok(())
    }

    /// Upper bound on each terminal output's record count where the operators
    /// make one computable without running them.
    pub fn output_bounds(&self, registry: &OperatorRegistry) -> Result<BTreeMap<String, Option<usize>>, AidpError> {
        self.validate(registry)?;
        let mut bounds: BTreeMap<&str, Option<usize>> = BTreeMap::new();
        for step in &self.steps {
            let op = registry.get(&step.op).expect("validated");
            let inputs: Vec<Option<usize>> = step.inputs.iter().map(|b| bounds[b.as_str()]).collect();
            bounds.insert(&step.output, op.output_bound(&step.params, &inputs));
        }
        Ok(self.outputs.iter().map(|(n, b)| (n.clone(), bounds[b.as_str()])).collect())
    }
}

fn valid_output_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arity {
    Exactly(usize),
    AtLeast(usize),
}

impl Arity {
    pub fn accepts(self, n: usize) -> bool {
        match self {
            Arity::Exactly(k) => n == k,
            Arity::AtLeast(k) => n >= k,
        }
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arity::Exactly(k) => write!(f, "exactly {k}"),
            Arity::AtLeast(k) => write!(f, "at least {k}"),
        }
    }
}

/// Endpoints, workspace root and the step seed handed to every operator.
#[derive(Clone, Default)]
pub struct OpEnv {
    pub workspace: PathBuf,
    /// Set per step by the runner.
    pub seed: u64,
    pub chat: Option<Arc<dyn ChatBackend>>,
    pub logprob: Option<Arc<dyn LogprobEndpoint>>,
    pub embedding: Option<Arc<dyn EmbeddingEndpoint>>,
    pub remote: Option<Arc<dyn RemoteSource>>,
}

impl fmt::Debug for OpEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OpEnv")
            .field("workspace", &self.workspace)
            .field("seed", &self.seed)
            .field("chat", &self.chat.is_some())
            .field("logprob", &self.logprob.is_some())
            .field("embedding", &self.embedding.is_some())
            .field("remote", &self.remote.is_some())
            .finish()
    }
}

impl OpEnv {
    pub fn new(workspace: impl Into<PathBuf>) -> Self {
        Self { workspace: workspace.into(), ..Self::default() }
    }

    pub fn with_chat(mut self, backend: Arc<dyn ChatBackend>) -> Self {
        self.chat = Some(backend);
        self
    }

    pub fn with_logprob(mut self, endpoint: Arc<dyn LogprobEndpoint>) -> Self {
        self.logprob = Some(endpoint);
        self
    }

    pub fn with_embedding(mut self, endpoint: Arc<dyn EmbeddingEndpoint>) -> Self {
        self.embedding = Some(endpoint);
        self
    }

    pub fn with_remote(mut self, source: Arc<dyn RemoteSource>) -> Self {
        self.remote = Some(source);
        self
    }

    fn chat(&self) -> Result<&dyn ChatBackend, AidpError> {
        self.chat.as_deref().ok_or_else(|| AidpError::Endpoint("no chat backend configured".into()))
    }

    /// Resolves a workspace-relative path. Absolute paths and `..` are refused.
    pub fn resolve(&self, rel: &str) -> Result<PathBuf, AidpError> {
        let p = Path::new(rel);
        if p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(AidpError::InvalidSpec(format!("path `{rel}` leaves the workspace")));
        }
        Ok(self.workspace.join(p))
    }
}

/// A named dataset transformation usable from pipeline specs.
pub trait Operator: Send + Sync {
    fn name(&self) -> &str;
    fn arity(&self) -> Arity;
    fn check_params(&self, params: &Value) -> Result<(), AidpError>;
    /// Largest possible output size given the input bounds; `None` when it
    /// depends on data not known before running.
    fn output_bound(&self, params: &Value, inputs: &[Option<usize>]) -> Option<usize>;
    fn run(&self, inputs: &[&DatasetHandle], params: &Value, env: &OpEnv) -> Result<DatasetHandle, AidpError>;
}

type CheckFn = fn(&Value) -> Result<(), AidpError>;
type BoundFn = fn(&Value, &[Option<usize>]) -> Option<usize>;
type RunFn = fn(&[&DatasetHandle], &Value, &OpEnv) -> Result<DatasetHandle, AidpError>;

struct BuiltinOp {
    name: &'static str,
    arity: Arity,
    check: CheckFn,
    bound: BoundFn,
    run: RunFn,
}

impl Operator for BuiltinOp {
    fn name(&self) -> &str {
        self.name
    }

    fn arity(&self) -> Arity {
        self.arity
    }

    fn check_params(&self, params: &Value) -> Result<(), AidpError> {
        (self.check)(params)
    }

    fn output_bound(&self, params: &Value, inputs: &[Option<usize>]) -> Option<usize> {
        (self.bound)(params, inputs)
    }

    fn run(&self, inputs: &[&DatasetHandle], params: &Value, env: &OpEnv) -> Result<DatasetHandle, AidpError> {
        (self.run)(inputs, params, env)
    }
}

fn parse<T: DeserializeOwned>(params: &Value) -> Result<T, AidpError> {
    let v = if params.is_null() { Value::Object(Default::default()) } else { params.clone() };
    serde_json::from_value(v).map_err(|e| AidpError::InvalidSpec(format!("bad parameters: {e}")))
}

fn field_of(s: &str) -> Result<TextField, AidpError> {
    TextField::parse(s).map_err(|e| AidpError::InvalidSpec(e.to_string()))
}

fn default_all() -> String {
    "all".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LocalParams {
    path: String,
    #[serde(default)]
    format: DatasetFormat,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RemoteParams {
    source_id: String,
    #[serde(default)]
    split: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldParams {
    #[serde(default = "default_all")]
    field: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbedParams {
    #[serde(default = "default_all")]
    field: String,
    #[serde(default = "default_batch")]
    batch_size: usize,
}

fn default_batch() -> usize {
    32
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateParams {
    template: String,
    n: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterParams {
    predicate: Predicate,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreParams {
    score_field: String,
    k: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RandomParams {
    n: usize,
    #[serde(default)]
    seed: Option<u64>,
}

fn no_check(_: &Value) -> Result<(), AidpError> {
    Ok(())
}

fn same_as_input(_: &Value, inputs: &[Option<usize>]) -> Option<usize> {
    inputs.first().copied().flatten()
}

fn unknown_bound(_: &Value, _: &[Option<usize>]) -> Option<usize> {
    None
}

fn capped(n: usize, input: Option<usize>) -> Option<usize> {
    Some(input.map_or(n, |i| i.min(n)))
}

fn builtins() -> Vec<BuiltinOp> {
    vec![
        BuiltinOp {
            name: "load_local_dataset",
            arity: Arity::Exactly(0),
            check: |p| parse::<LocalParams>(p).map(|_| ()),
            bound: unknown_bound,
            run: |_, p, env| {
                let p: LocalParams = parse(p)?;
                super::load_local_dataset(&env.resolve(&p.path)?, p.format)
            },
        },
        BuiltinOp {
            name: "load_remote_dataset",
            arity: Arity::Exactly(0),
            check: |p| parse::<RemoteParams>(p).map(|_| ()),
            bound: unknown_bound,
            run: |_, p, env| {
                let p: RemoteParams = parse(p)?;
                let remote = env
                    .remote
                    .as_deref()
                    .ok_or_else(|| AidpError::BridgeUnavailable("no remote source configured".into()))?;
                ops::load_remote_dataset(remote, &p.source_id, p.split.as_deref())
            },
        },
        BuiltinOp {
            name: "compute_perplexity",
            arity: Arity::Exactly(1),
            check: |p| field_of(&parse::<FieldParams>(p)?.field).map(|_| ()),
            bound: same_as_input,
            run: |i, p, env| {
                let p: FieldParams = parse(p)?;
                let endpoint = env
                    .logprob
                    .as_deref()
                    .ok_or_else(|| AidpError::Endpoint("no logprob endpoint configured".into()))?;
                ops::compute_perplexity(i[0], endpoint, &field_of(&p.field)?)
            },
        },
        BuiltinOp {
            name: "score_dataset_with_llm",
            arity: Arity::Exactly(1),
            check: |p| {
                let r: JudgeRubric = parse(p)?;
                field_of(&r.field)?;
                if !(r.min < r.max) {
                    return Err(AidpError::InvalidSpec("judge scale needs min < max".into()));
                }
                Ok(())
            },
            bound: same_as_input,
            run: |i, p, env| ops::score_dataset_with_llm(i[0], &parse(p)?, env.chat()?),
        },
        BuiltinOp {
            name: "generate_text_embeddings",
            arity: Arity::Exactly(1),
            check: |p| field_of(&parse::<EmbedParams>(p)?.field).map(|_| ()),
            bound: same_as_input,
            run: |i, p, env| {
                let p: EmbedParams = parse(p)?;
                let endpoint = env
                    .embedding
                    .as_deref()
                    .ok_or_else(|| AidpError::Endpoint("no embedding endpoint configured".into()))?;
                ops::generate_text_embeddings(i[0], endpoint, &field_of(&p.field)?, p.batch_size)
            },
        },
        BuiltinOp {
            name: "generate_dataset_with_llm",
            arity: Arity::Exactly(1),
            check: |p| parse::<GenerateParams>(p).map(|_| ()),
            bound: |p, _| parse::<GenerateParams>(p).ok().map(|g| g.n),
            run: |i, p, env| {
                let p: GenerateParams = parse(p)?;
                ops::generate_dataset_with_llm(i[0], &p.template, env.chat()?, p.n)
            },
        },
        BuiltinOp {
            name: "generate_preference_dataset",
            arity: Arity::Exactly(1),
            check: |p| parse::<RankingRule>(p).map(|_| ()),
            bound: |_, i| i.first().copied().flatten().map(|n| n / 2),
            run: |i, p, _| ops::generate_preference_dataset(i[0], &parse(p)?),
        },
        BuiltinOp {
            name: "deduplicate_by_text_hash",
            arity: Arity::Exactly(1),
            check: |p| field_of(&parse::<FieldParams>(p)?.field).map(|_| ()),
            bound: same_as_input,
            run: |i, p, _| ops::deduplicate_by_text_hash(i[0], &field_of(&parse::<FieldParams>(p)?.field)?),
        },
        BuiltinOp {
            name: "select_by_filter",
            arity: Arity::Exactly(1),
            check: |p| parse::<FilterParams>(p)?.predicate.check().map_err(|e| AidpError::InvalidSpec(e.to_string())),
            bound: same_as_input,
            run: |i, p, _| ops::select_by_predicate(i[0], &parse::<FilterParams>(p)?.predicate),
        },
        BuiltinOp {
            name: "select_by_score",
            arity: Arity::Exactly(1),
            check: |p| parse::<ScoreParams>(p).map(|_| ()),
            bound: |p, i| parse::<ScoreParams>(p).ok().and_then(|s| capped(s.k, i.first().copied().flatten())),
            run: |i, p, _| {
                let p: ScoreParams = parse(p)?;
                ops::select_by_score(i[0], &p.score_field, p.k)
            },
        },
        BuiltinOp {
            name: "select_by_random",
            arity: Arity::Exactly(1),
            check: |p| parse::<RandomParams>(p).map(|_| ()),
            bound: |p, i| parse::<RandomParams>(p).ok().and_then(|r| capped(r.n, i.first().copied().flatten())),
            run: |i, p, env| {
                let p: RandomParams = parse(p)?;
                Ok(ops::select_by_random(i[0], p.n, p.seed.unwrap_or(env.seed)))
            },
        },
        BuiltinOp {
            name: "concatenate",
            arity: Arity::AtLeast(1),
            check: no_check,
            bound: |_, i| i.iter().try_fold(0usize, |acc, b| b.map(|b| acc + b)),
            run: |i, _, _| Ok(ops::concatenate(i)),
        },
        BuiltinOp {
            name: "format_messages",
            arity: Arity::Exactly(1),
            check: |p| parse::<MessageTemplates>(p).map(|_| ()),
            bound: same_as_input,
            run: |i, p, _| ops::format_messages(i[0], &parse(p)?),
        },
    ]
}

/// Operators by name. `with_builtins` registers the full dataset operator
/// suite plus `concatenate` and `format_messages`.
pub struct OperatorRegistry {
    ops: BTreeMap<String, Arc<dyn Operator>>,
}

impl Default for OperatorRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl OperatorRegistry {
    pub fn empty() -> Self {
        Self { ops: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        for op in builtins() {
            r.register(Arc::new(op));
        }
        r
    }

    /// Adds or replaces an operator under its own name.
    pub fn register(&mut self, op: Arc<dyn Operator>) {
        self.ops.insert(op.name().to_string(), op);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Operator> {
        self.ops.get(name).map(|o| o.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ops.keys().map(String::as_str)
    }
}

impl fmt::Debug for OperatorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.ops.keys()).finish()
    }
}

#[derive(Clone, Debug, Default)]
pub struct PipelineOutput {
    pub datasets: BTreeMap<String, DatasetHandle>,
    /// Absolute paths of the materialized files.
    pub files: BTreeMap<String, PathBuf>,
}

/// Validates and runs `spec` step by step, then writes each terminal output
/// to `<workspace>/datasets/<name>.jsonl`. Nothing is written if any output
/// exceeds `max_samples`.
pub fn run_pipeline(
    spec: &PipelineSpec,
    registry: &OperatorRegistry,
    env: &OpEnv,
    max_samples: usize,
) -> Result<PipelineOutput, AidpError> {
    spec.validate(registry)?;
    let mut bindings: BTreeMap<&str, DatasetHandle> = BTreeMap::new();
    for (index, step) in spec.steps.iter().enumerate() {
        let op = registry.get(&step.op).expect("validated");
        let inputs: Vec<&DatasetHandle> = step.inputs.iter().map(|b| &bindings[b.as_str()]).collect();
        let step_env = OpEnv { seed: spec.step_seed(index), ..env.clone() };
        let out = op.run(&inputs, &step.params, &step_env).map_err(|e| AidpError::Step {
            index,
            op: step.op.clone(),
            source: Box::new(e),
        })?;
        log::debug!("pipeline step {index} ({}) -> {} records", step.op, out.len());
        bindings.insert(&step.output, out);
    }
    for (name, binding) in &spec.outputs {
        let count = bindings[binding.as_str()].len();
        if count > max_samples {
            return Err(AidpError::CapExceeded { output: name.clone(), count, cap: max_samples });
        }
    }
    let mut result = PipelineOutput::default();
    for (name, binding) in &spec.outputs {
        let ds = bindings[binding.as_str()].clone();
        let path = env.workspace.join(PipelineSpec::output_path(name));
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| AidpError::io(dir, e))?;
        }
        ds.write_jsonl(&path)?;
        result.files.insert(name.clone(), path);
        result.datasets.insert(name.clone(), ds);
    }
    Ok(result)
}
