//! Domain types shared across the engine: task definitions, plans, training
//! configurations, results, and the experiment tree itself.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aidp::PipelineSpec;

pub const DEFAULT_MAX_TRAIN_SAMPLES: usize = 50_000;
pub const DEFAULT_MAX_ITERATIONS: usize = 20;
pub const DEFAULT_MAX_PARALLEL_CONFIGS: usize = 5;
/// Largest grid a baseline root plan may carry; it is executed in batches of
/// `max_parallel_configs`.
pub const DEFAULT_MAX_BASELINE_GRID: usize = 11;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("task file does not parse: {0}")]
    Parse(String),
    #[error("initial training data does not parse: {0}")]
    InvalidData(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum ResultError {
    #[error("every configuration in the batch failed")]
    AllConfigsFailed,
}

/// A scalar value in free-form parameter maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl Scalar {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Int(i) => Some(*i as f64),
            Scalar::Float(f) => Some(*f),
            _ => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Int(i) => write!(f, "{i}"),
            Scalar::Float(x) => write!(f, "{x}"),
            Scalar::Text(s) => write!(f, "{s}"),
        }
    }
}

/// Name and bounded range of the task's primary metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

/// How an evaluation output is compared with its reference answer.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatchRule {
    #[default]
    Exact,
    Numeric {
        tolerance: f64,
    },
    Contains,
}

impl MatchRule {
    pub fn matches(&self, expected: &str, actual: &str) -> bool {
        match self {
            MatchRule::Exact => expected.trim() == actual.trim(),
            MatchRule::Contains => actual.contains(expected.trim()),
            MatchRule::Numeric { tolerance } => {
                match (expected.trim().parse::<f64>(), actual.trim().parse::<f64>()) {
                    (Ok(e), Ok(a)) => (e - a).abs() <= *tolerance,
                    _ => false,
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    pub max_train_samples: usize,
    pub max_iterations: usize,
    pub max_parallel_configs: usize,
    pub max_baseline_grid: usize,
}

impl Default for Constraints {
    fn default() -> Self {
        Self {
            max_train_samples: DEFAULT_MAX_TRAIN_SAMPLES,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            max_parallel_configs: DEFAULT_MAX_PARALLEL_CONFIGS,
            max_baseline_grid: DEFAULT_MAX_BASELINE_GRID,
        }
    }
}

/// A validated task definition with every default filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDefinition {
    pub task_id: String,
    pub description: String,
    /// Evaluation entry: a command for the bridge or a simulated landscape id.
    pub eval_protocol: String,
    pub primary_metric: MetricSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_train_data: Option<PathBuf>,
    pub constraints: Constraints,
    pub base_model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_score: Option<f64>,
    #[serde(default)]
    pub match_rule: MatchRule,
}

/// Task definition as written by a user; every field may be absent.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTaskDefinition {
    pub task_id: Option<String>,
    pub description: Option<String>,
    pub eval_protocol: Option<String>,
    pub primary_metric: Option<MetricSpec>,
    pub initial_train_data: Option<PathBuf>,
    #[serde(default)]
    pub constraints: RawConstraints,
    pub base_model_id: Option<String>,
    pub ref_score: Option<f64>,
    pub base_score: Option<f64>,
    pub match_rule: Option<MatchRule>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConstraints {
    pub max_train_samples: Option<usize>,
    pub max_iterations: Option<usize>,
    pub max_parallel_configs: Option<usize>,
    pub max_baseline_grid: Option<usize>,
}

impl From<TaskDefinition> for RawTaskDefinition {
    fn from(t: TaskDefinition) -> Self {
        Self {
            task_id: Some(t.task_id),
            description: Some(t.description),
            eval_protocol: Some(t.eval_protocol),
            primary_metric: Some(t.primary_metric),
            initial_train_data: t.initial_train_data,
            constraints: RawConstraints {
                max_train_samples: Some(t.constraints.max_train_samples),
                max_iterations: Some(t.constraints.max_iterations),
                max_parallel_configs: Some(t.constraints.max_parallel_configs),
                max_baseline_grid: Some(t.constraints.max_baseline_grid),
            },
            base_model_id: Some(t.base_model_id),
            ref_score: t.ref_score,
            base_score: t.base_score,
            match_rule: Some(t.match_rule),
        }
    }
}

/// Fills defaults and checks every task invariant.
pub fn validate_task(raw: RawTaskDefinition) -> Result<TaskDefinition, TaskError> {
    let task_id = raw.task_id.ok_or(TaskError::MissingField("task_id"))?;
    let description = raw.description.ok_or(TaskError::MissingField("description"))?;
    let eval_protocol = raw.eval_protocol.ok_or(TaskError::MissingField("eval_protocol"))?;
    let primary_metric = raw.primary_metric.ok_or(TaskError::MissingField("primary_metric"))?;
    let base_model_id = raw.base_model_id.ok_or(TaskError::MissingField("base_model_id"))?;

    if !(primary_metric.lo < primary_metric.hi) {
        return Err(TaskError::InvalidRange(format!(
            "metric range [{}, {}] needs lo < hi",
            primary_metric.lo, primary_metric.hi
        )));
    }
    let defaults = Constraints::default();
    let constraints = Constraints {
        max_train_samples: raw.constraints.max_train_samples.unwrap_or(defaults.max_train_samples),
        max_iterations: raw.constraints.max_iterations.unwrap_or(defaults.max_iterations),
        max_parallel_configs: raw
            .constraints
            .max_parallel_configs
            .unwrap_or(defaults.max_parallel_configs),
        max_baseline_grid: raw.constraints.max_baseline_grid.unwrap_or(defaults.max_baseline_grid),
    };
    if constraints.max_iterations < 1 {
        return Err(TaskError::InvalidRange("max_iterations must be at least 1".into()));
    }
    if constraints.max_train_samples < 1 {
        return Err(TaskError::InvalidRange("max_train_samples must be at least 1".into()));
    }
    if !(3..=5).contains(&constraints.max_parallel_configs) {
        return Err(TaskError::InvalidRange(format!(
            "max_parallel_configs = {} outside 3..=5",
            constraints.max_parallel_configs
        )));
    }
    if constraints.max_baseline_grid < 1 {
        return Err(TaskError::InvalidRange("max_baseline_grid must be at least 1".into()));
    }
    if let Some(rule) = &raw.match_rule {
        if let MatchRule::Numeric { tolerance } = rule {
            if !(*tolerance >= 0.0) {
                return Err(TaskError::InvalidRange("numeric tolerance must be >= 0".into()));
            }
        }
    }
    if let Some(path) = &raw.initial_train_data {
        if !path.exists() {
            return Err(TaskError::FileNotFound(path.clone()));
        }
        crate::aidp::load_local_dataset(path, crate::aidp::DatasetFormat::Jsonl)
            .map_err(|e| TaskError::InvalidData(e.to_string()))?;
    }

    Ok(TaskDefinition {
        task_id,
        description,
        eval_protocol,
        primary_metric,
        initial_train_data: raw.initial_train_data,
        constraints,
        base_model_id,
        ref_score: raw.ref_score,
        base_score: raw.base_score,
        match_rule: raw.match_rule.unwrap_or_default(),
    })
}

impl TaskDefinition {
    /// Parses a TOML task document. Relative data paths are resolved against
    /// `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self, TaskError> {
        let mut raw: RawTaskDefinition =
            toml::from_str(text).map_err(|e| TaskError::Parse(e.to_string()))?;
        if let (Some(dir), Some(p)) = (base_dir, raw.initial_train_data.as_ref()) {
            if p.is_relative() {
                raw.initial_train_data = Some(dir.join(p));
            }
        }
        validate_task(raw)
    }

    pub fn load(path: &Path) -> Result<Self, TaskError> {
        let text = std::fs::read_to_string(path)
            .map_err(|_| TaskError::FileNotFound(path.to_path_buf()))?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("task definitions always serialize")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuningType {
    Full,
    Lora,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub config_id: String,
    pub finetuning_type: FinetuningType,
    pub learning_rate: f64,
    pub epochs: f64,
    pub per_device_batch: u32,
    pub grad_accum: u32,
    pub cutoff_len: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_rank: Option<u32>,
    /// Workspace-relative dataset path, normally `datasets/<name>.jsonl`.
    pub dataset_path: String,
    /// Hub id, local path, or `node:<id>` for a model produced by another node.
    pub base_model_path: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, Scalar>,
}

impl TrainingConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.config_id.trim().is_empty() {
            return Err("config_id is empty".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("{}: learning_rate must be > 0", self.config_id));
        }
        if !(self.epochs > 0.0 && self.epochs.is_finite()) {
            return Err(format!("{}: epochs must be > 0", self.config_id));
        }
        if self.per_device_batch == 0 || self.grad_accum == 0 {
            return Err(format!("{}: batch size and accumulation must be >= 1", self.config_id));
        }
        if self.cutoff_len == 0 {
            return Err(format!("{}: cutoff_len must be >= 1", self.config_id));
        }
        Ok(())
    }

    /// Requested training sample count, when the plan declares one.
    pub fn train_samples(&self) -> Option<f64> {
        self.extra.get("train_samples").and_then(Scalar::as_f64)
    }
}

/// High-level improvement strategies a plan can follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    EstablishBaseline,
    RefineDataPipeline,
    ConstructSyntheticData,
    AdjustTrainingScheme,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::EstablishBaseline,
        StrategyKind::RefineDataPipeline,
        StrategyKind::ConstructSyntheticData,
        StrategyKind::AdjustTrainingScheme,
    ];

    /// Strategies that may be chosen below the root.
    pub const REFINEMENTS: [StrategyKind; 3] = [
        StrategyKind::RefineDataPipeline,
        StrategyKind::ConstructSyntheticData,
        StrategyKind::AdjustTrainingScheme,
    ];

    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::EstablishBaseline => "Establish Baseline",
            StrategyKind::RefineDataPipeline => "Refine Data Pipeline",
            StrategyKind::ConstructSyntheticData => "Construct Synthetic Data",
            StrategyKind::AdjustTrainingScheme => "Adjust Training Scheme",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            StrategyKind::EstablishBaseline => "establish_baseline",
            StrategyKind::RefineDataPipeline => "refine_data_pipeline",
            StrategyKind::ConstructSyntheticData => "construct_synthetic_data",
            StrategyKind::AdjustTrainingScheme => "adjust_training_scheme",
        }
    }

    /// Accepts the display label or the slug, case- and separator-insensitive.
    pub fn parse_label(text: &str) -> Option<Self> {
        let norm = normalize_label(text);
        Self::ALL
            .into_iter()
            .find(|s| normalize_label(s.label()) == norm || normalize_label(s.slug()) == norm)
    }
}

fn normalize_label(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One round's plan: what to try, how to build the data, and the batch of
/// training configurations to run side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub mission: String,
    pub strategy: StrategyKind,
    #[serde(default)]
    pub data_spec: PipelineSpec,
    pub configs: Vec<TrainingConfig>,
    #[serde(default)]
    pub rationale: String,
}

impl ExperimentPlan {
    /// Upper bound on configurations for this plan under `constraints`.
    pub fn config_limit(&self, constraints: &Constraints) -> usize {
        if self.strategy == StrategyKind::EstablishBaseline {
            constraints.max_baseline_grid.max(constraints.max_parallel_configs)
        } else {
            constraints.max_parallel_configs
        }
    }

    /// Execution batches of at most `cap` configurations, in plan order.
    pub fn batches(&self, cap: usize) -> Vec<&[TrainingConfig]> {
        self.configs.chunks(cap.max(1)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigOutcome {
    pub config_id: String,
    pub status: ConfigStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<String>,
    #[serde(default)]
    pub log_excerpt: String,
}

impl ConfigOutcome {
    pub fn ok(config_id: impl Into<String>, raw_score: f64) -> Self {
        Self {
            config_id: config_id.into(),
            status: ConfigStatus::Ok,
            raw_score: Some(raw_score),
            artifacts: Vec::new(),
            log_excerpt: String::new(),
        }
    }

    pub fn failed(config_id: impl Into<String>, log: impl Into<String>) -> Self {
        Self {
            config_id: config_id.into(),
            status: ConfigStatus::Failed,
            raw_score: None,
            artifacts: Vec::new(),
            log_excerpt: log.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub per_config: Vec<ConfigOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_config_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_raw_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_report: Option<String>,
    pub wall_time: f64,
}

impl ExperimentResult {
    /// Aggregates per-config outcomes; the best entry is the highest ok score,
    /// earliest config on ties.
    pub fn from_outcomes(per_config: Vec<ConfigOutcome>, wall_time: f64) -> Self {
        let mut best: Option<(&str, f64)> = None;
        for c in &per_config {
            if let (ConfigStatus::Ok, Some(s)) = (c.status, c.raw_score) {
                if best.map_or(true, |(_, b)| s > b) {
                    best = Some((&c.config_id, s));
                }
            }
        }
        let (best_config_id, best_raw_score) = match best {
            Some((id, s)) => (Some(id.to_string()), Some(s)),
            None => (None, None),
        };
        Self { per_config, best_config_id, best_raw_score, eval_report: None, wall_time }
    }

    pub fn all_failed(&self) -> bool {
        self.best_raw_score.is_none()
    }

    pub fn ok_count(&self) -> usize {
        self.per_config.iter().filter(|c| c.status == ConfigStatus::Ok).count()
    }
}

/// Best raw score over the configurations that finished.
pub fn node_best_score(result: &ExperimentResult) -> Result<f64, ResultError> {
    result
        .per_config
        .iter()
        .filter(|c| c.status == ConfigStatus::Ok)
        .filter_map(|c| c.raw_score)
        .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.max(s))))
        .ok_or(ResultError::AllConfigsFailed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Pending,
    Running,
    Done,
    Failed,
}

impl NodeStatus {
    pub fn is_complete(self) -> bool {
        matches!(self, NodeStatus::Done | NodeStatus::Failed)
    }
}

impl fmt::Display for NodeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NodeStatus::Pending => "Pending",
            NodeStatus::Running => "Running",
            NodeStatus::Done => "Done",
            NodeStatus::Failed => "Failed",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    #[serde(default)]
    pub children: Vec<NodeId>,
    /// Absent when plan generation itself failed.
    pub plan: Option<ExperimentPlan>,
    pub result: Option<ExperimentResult>,
    /// N: this node's experiment plus every completed descendant experiment.
    pub visits: u64,
    /// Q: own reward plus the rewards of every completed descendant.
    pub total_reward: f64,
    /// Normalized reward of this node's own experiment.
    pub reward: Option<f64>,
    pub status: NodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ExperimentNode {
    pub fn pending(id: NodeId, parent: Option<NodeId>, plan: Option<ExperimentPlan>) -> Self {
        Self {
            id,
            parent,
            children: Vec::new(),
            plan,
            result: None,
            visits: 0,
            total_reward: 0.0,
            reward: None,
            status: NodeStatus::Pending,
            diagnosis: None,
            error: None,
        }
    }

    pub fn strategy(&self) -> Option<StrategyKind> {
        self.plan.as_ref().map(|p| p.strategy)
    }

    pub fn best_raw_score(&self) -> Option<f64> {
        self.result.as_ref().and_then(|r| r.best_raw_score)
    }

    pub fn mean_reward(&self) -> Option<f64> {
        (self.visits > 0).then(|| self.total_reward / self.visits as f64)
    }
}

/// The search state. Node ids are creation indices starting at 1, so id order
/// is a topological order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTree {
    #[serde(with = "node_list")]
    nodes: BTreeMap<NodeId, ExperimentNode>,
    root: Option<NodeId>,
    next_id: u64,
}

mod node_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        nodes: &BTreeMap<NodeId, ExperimentNode>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(nodes.values())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<NodeId, ExperimentNode>, D::Error> {
        let list = Vec::<ExperimentNode>::deserialize(d)?;
        Ok(list.into_iter().map(|n| (n.id, n)).collect())
    }
}

impl ExperimentTree {
    pub fn new() -> Self {
        Self { nodes: BTreeMap::new(), root: None, next_id: 1 }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn get(&self, id: NodeId) -> Option<&ExperimentNode> {
        self.nodes.get(&id)
    }

    pub fn get_mut(&mut self, id: NodeId) -> Option<&mut ExperimentNode> {
        self.nodes.get_mut(&id)
    }

    /// Nodes in creation order.
    pub fn nodes(&self) -> impl Iterator<Item = &ExperimentNode> {
        self.nodes.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    /// Number of completed (Done or Failed) experiments.
    pub fn iteration_count(&self) -> usize {
        self.nodes.values().filter(|n| n.status.is_complete()).count()
    }

    pub fn next_id(&self) -> NodeId {
        NodeId(self.next_id)
    }

    /// Inserts a pending node; the first insertion becomes the root.
    /// Callers go through `search::expand` or `search::plant_root` which check
    /// the preconditions.
    pub(crate) fn insert(
        &mut self,
        parent: Option<NodeId>,
        plan: Option<ExperimentPlan>,
    ) -> NodeId {
        let id = NodeId(self.next_id.max(1));
        self.next_id = id.0 + 1;
        self.nodes.insert(id, ExperimentNode::pending(id, parent, plan));
        match parent {
            Some(p) => {
                if let Some(pn) = self.nodes.get_mut(&p) {
                    pn.children.push(id);
                }
            }
            None => self.root = Some(id),
        }
        id
    }

    /// Ancestors of `id`, root first, including `id` itself.
    pub fn path_from_root(&self, id: NodeId) -> Option<Vec<NodeId>> {
        let mut path = vec![id];
        let mut cur = self.get(id)?;
        while let Some(p) = cur.parent {
            path.push(p);
            cur = self.get(p)?;
        }
        path.reverse();
        Some(path)
    }

    pub fn depth(&self, id: NodeId) -> Option<usize> {
        self.path_from_root(id).map(|p| p.len() - 1)
    }

    /// Checks structure plus the visit and reward sums against a from-scratch
    /// recomputation over completed nodes.
    pub fn check_consistency(&self) -> Result<(), String> {
        let roots: Vec<_> = self.nodes.values().filter(|n| n.parent.is_none()).collect();
        if !self.nodes.is_empty() && roots.len() != 1 {
            return Err(format!("expected one root, found {}", roots.len()));
        }
        if roots.first().map(|r| r.id) != self.root {
            return Err("root pointer does not match the parentless node".into());
        }
        for n in self.nodes.values() {
            if let Some(p) = n.parent {
                if p >= n.id {
                    return Err(format!("{} has parent {} with a larger id", n.id, p));
                }
                let parent = self.get(p).ok_or_else(|| format!("{}: missing parent {p}", n.id))?;
                if !parent.children.contains(&n.id) {
                    return Err(format!("{p} does not list child {}", n.id));
                }
            }
            let own_visit = u64::from(n.status.is_complete());
            let own_reward = if n.status.is_complete() { n.reward.unwrap_or(0.0) } else { 0.0 };
            let child_visits: u64 = n.children.iter().filter_map(|c| self.get(*c)).map(|c| c.visits).sum();
            let child_q: f64 =
                n.children.iter().filter_map(|c| self.get(*c)).map(|c| c.total_reward).sum();
            if n.visits != own_visit + child_visits {
                return Err(format!("{}: N = {} but recomputed {}", n.id, n.visits, own_visit + child_visits));
            }
            if (n.total_reward - (own_reward + child_q)).abs() > 1e-9 {
                return Err(format!(
                    "{}: Q = {} but recomputed {}",
                    n.id,
                    n.total_reward,
                    own_reward + child_q
                ));
            }
            if n.total_reward < -1e-12 || n.total_reward > n.visits as f64 + 1e-9 {
                return Err(format!("{}: Q outside [0, N]", n.id));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw() -> RawTaskDefinition {
        RawTaskDefinition {
            task_id: Some("t".into()),
            description: Some("d".into()),
            eval_protocol: Some("sim:deceptive".into()),
            primary_metric: Some(MetricSpec { name: "acc".into(), lo: 0.0, hi: 1.0 }),
            base_model_id: Some("base".into()),
            ..Default::default()
        }
    }

    #[test]
    fn defaults_are_filled() {
        let t = validate_task(raw()).unwrap();
        assert_eq!(t.constraints.max_iterations, 20);
        assert_eq!(t.constraints.max_train_samples, 50_000);
        assert_eq!(t.constraints.max_parallel_configs, 5);
        // Validating an already valid definition is the identity.
        let again = validate_task(t.clone().into()).unwrap();
        assert_eq!(again, t);
    }

    #[test]
    fn degenerate_range_rejected() {
        let mut r = raw();
        r.primary_metric = Some(MetricSpec { name: "acc".into(), lo: 0.5, hi: 0.5 });
        assert!(matches!(validate_task(r), Err(TaskError::InvalidRange(_))));
    }

    #[test]
    fn missing_fields_and_files() {
        let mut r = raw();
        r.task_id = None;
        assert!(matches!(validate_task(r), Err(TaskError::MissingField("task_id"))));
        let mut r = raw();
        r.initial_train_data = Some("/definitely/not/here.jsonl".into());
        assert!(matches!(validate_task(r), Err(TaskError::FileNotFound(_))));
        let mut r = raw();
        r.constraints.max_parallel_configs = Some(7);
        assert!(matches!(validate_task(r), Err(TaskError::InvalidRange(_))));
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
task_id = "tomg"
description = "molecule generation"
eval_protocol = "sim:deceptive"
base_model_id = "Qwen/Qwen3-1.7B"

[primary_metric]
name = "score"
lo = 0.0
hi = 1.0
"#;
        let t = TaskDefinition::from_toml_str(text, None).unwrap();
        assert_eq!(t.constraints.max_iterations, 20);
        let back = TaskDefinition::from_toml_str(&t.to_toml_string(), None).unwrap();
        assert_eq!(back, t);
    }

    fn outcomes(scores: &[Option<f64>]) -> ExperimentResult {
        let per = scores
            .iter()
            .enumerate()
            .map(|(i, s)| match s {
                Some(v) => ConfigOutcome::ok(format!("c{i}"), *v),
                None => ConfigOutcome::failed(format!("c{i}"), "crash"),
            })
            .collect();
        ExperimentResult::from_outcomes(per, 0.0)
    }

    #[test]
    fn best_score_examples() {
        let r = outcomes(&[Some(0.31), Some(0.47), Some(0.40)]);
        assert_eq!(node_best_score(&r), Ok(0.47));
        assert_eq!(r.best_config_id.as_deref(), Some("c1"));
        let r = outcomes(&[None, None, Some(0.2), None, None]);
        assert_eq!(node_best_score(&r), Ok(0.2));
        let r = outcomes(&[None, None]);
        assert_eq!(node_best_score(&r), Err(ResultError::AllConfigsFailed));
        assert!(r.all_failed());
    }

    #[test]
    fn strategy_labels_parse() {
        for s in StrategyKind::ALL {
            assert_eq!(StrategyKind::parse_label(s.label()), Some(s));
            assert_eq!(StrategyKind::parse_label(s.slug()), Some(s));
        }
        assert_eq!(StrategyKind::parse_label("refine data-pipeline"), Some(StrategyKind::RefineDataPipeline));
        assert_eq!(StrategyKind::parse_label("do something"), None);
    }

    #[test]
    fn match_rules() {
        assert!(MatchRule::Exact.matches("a", " a "));
        assert!(!MatchRule::Exact.matches("a", "b"));
        assert!(MatchRule::Numeric { tolerance: 0.01 }.matches("1.0", "1.005"));
        assert!(!MatchRule::Numeric { tolerance: 0.01 }.matches("1.0", "x"));
        assert!(MatchRule::Contains.matches("CCO", "answer: CCO"));
    }
}
