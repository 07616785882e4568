//! Node selection policies, expansion and reward backpropagation.
//!
//! Policies implement [`SelectionPolicy`] and are created by name through a
//! [`PolicyRegistry`]. The built-in entries are `mcts` (UCT), `gbfs` (greedy
//! best-first on own reward) and `ses` (always extend the newest completed
//! node).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ExperimentNode, ExperimentPlan, ExperimentTree, NodeId, NodeStatus, StrategyKind,
    TaskDefinition, TrainingConfig,
};

pub const DEFAULT_EXPLORATION: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Error, PartialEq)]
pub enum SearchError {
    #[error("node {0} has an invalid visit count for UCT")]
    InvalidVisitCount(NodeId),
    #[error("no completed node is available for selection")]
    NoCandidates,
    #[error("parent {0} is not Done")]
    ParentNotDone(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} already completed")]
    AlreadyComplete(NodeId),
    #[error("reward {0} outside [0, 1]")]
    InvalidReward(f64),
    #[error("baseline grid is empty")]
    EmptyGrid,
    #[error("baseline grid has {size} configurations, limit is {limit}")]
    GridTooLarge { size: usize, limit: usize },
    #[error("the tree already has a root")]
    TreeNotEmpty,
    #[error("{0}")]
    IllegalStrategy(String),
    #[error("unknown selection policy `{0}`")]
    UnknownPolicy(String),
    #[error("exploration constant must be finite and >= 0, got {0}")]
    InvalidExploration(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UctParams {
    pub exploration: f64,
}

impl Default for UctParams {
    fn default() -> Self {
        Self { exploration: DEFAULT_EXPLORATION }
    }
}

impl UctParams {
    pub fn new(exploration: f64) -> Result<Self, SearchError> {
        if !(exploration >= 0.0 && exploration.is_finite()) {
            return Err(SearchError::InvalidExploration(exploration));
        }
        Ok(Self { exploration })
    }
}

/// `Q/N + c * sqrt(ln(N_parent) / N)`.
pub fn uct_score(
    node: &ExperimentNode,
    parent_visits: u64,
    params: &UctParams,
) -> Result<f64, SearchError> {
    if node.visits == 0 || parent_visits < node.visits {
        return Err(SearchError::InvalidVisitCount(node.id));
    }
    let n = node.visits as f64;
    let exploit = node.total_reward / n;
    let explore = params.exploration * ((parent_visits as f64).ln() / n).sqrt();
    Ok(exploit + explore)
}

/// Visit count used as `N_parent` for `node`. The root uses its own count.
pub fn parent_visits(tree: &ExperimentTree, node: &ExperimentNode) -> u64 {
    match node.parent.and_then(|p| tree.get(p)) {
        Some(p) => p.visits,
        None => node.visits,
    }
}

/// Nodes eligible for selection: every Done node, in id order.
pub fn candidates(tree: &ExperimentTree) -> impl Iterator<Item = &ExperimentNode> {
    tree.nodes().filter(|n| n.status == NodeStatus::Done)
}

/// A node-selection strategy over a tree snapshot.
pub trait SelectionPolicy: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn select(&self, tree: &ExperimentTree) -> Result<NodeId, SearchError>;
}

/// Returns the candidate with the highest key; ties go to the lowest id.
fn argmax_by<F>(tree: &ExperimentTree, mut key: F) -> Result<NodeId, SearchError>
where
    F: FnMut(&ExperimentNode) -> Result<f64, SearchError>,
{
    let mut best: Option<(NodeId, f64)> = None;
    for node in candidates(tree) {
        let k = key(node)?;
        if best.map_or(true, |(_, b)| k > b) {
            best = Some((node.id, k));
        }
    }
    best.map(|(id, _)| id).ok_or(SearchError::NoCandidates)
}

#[derive(Clone, Debug, Default)]
pub struct Mcts {
    pub params: UctParams,
}

impl SelectionPolicy for Mcts {
    fn name(&self) -> &str {
        "mcts"
    }

    fn select(&self, tree: &ExperimentTree) -> Result<NodeId, SearchError> {
        argmax_by(tree, |n| uct_score(n, parent_visits(tree, n), &self.params))
    }
}

/// Greedy best-first: the node whose own experiment scored highest.
#[derive(Clone, Debug, Default)]
pub struct Gbfs;

impl SelectionPolicy for Gbfs {
    fn name(&self) -> &str {
        "gbfs"
    }

    fn select(&self, tree: &ExperimentTree) -> Result<NodeId, SearchError> {
        argmax_by(tree, |n| Ok(n.reward.unwrap_or(0.0)))
    }
}

/// Sequential expansion: keep extending the most recently completed node.
#[derive(Clone, Debug, Default)]
pub struct Ses;

impl SelectionPolicy for Ses {
    fn name(&self) -> &str {
        "ses"
    }

    fn select(&self, tree: &ExperimentTree) -> Result<NodeId, SearchError> {
        candidates(tree).last().map(|n| n.id).ok_or(SearchError::NoCandidates)
    }
}

type PolicyFactory = Box<dyn Fn(&UctParams) -> Box<dyn SelectionPolicy> + Send + Sync>;

/// Name-indexed constructors for selection policies.
pub struct PolicyRegistry {
    factories: BTreeMap<String, PolicyFactory>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("mcts", |p| Box::new(Mcts { params: *p }));
        r.register("gbfs", |_| Box::new(Gbfs));
        r.register("ses", |_| Box::new(Ses));
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&UctParams) -> Box<dyn SelectionPolicy> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_ascii_lowercase(), Box::new(factory));
    }

    pub fn create(
        &self,
        name: &str,
        params: &UctParams,
    ) -> Result<Box<dyn SelectionPolicy>, SearchError> {
        self.factories
            .get(&name.to_ascii_lowercase())
            .map(|f| f(params))
            .ok_or_else(|| SearchError::UnknownPolicy(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

impl fmt::Debug for PolicyRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

/// Serializable choice of built-in policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum SearchPolicy {
    Mcts(UctParams),
    Gbfs,
    Ses,
}

impl Default for SearchPolicy {
    fn default() -> Self {
        SearchPolicy::Mcts(UctParams::default())
    }
}

impl SearchPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            SearchPolicy::Mcts(_) => "mcts",
            SearchPolicy::Gbfs => "gbfs",
            SearchPolicy::Ses => "ses",
        }
    }

    pub fn parse(name: &str, exploration: Option<f64>) -> Result<Self, SearchError> {
        match name.to_ascii_lowercase().as_str() {
            "mcts" | "uct" => Ok(SearchPolicy::Mcts(UctParams::new(
                exploration.unwrap_or(DEFAULT_EXPLORATION),
            )?)),
            "gbfs" => Ok(SearchPolicy::Gbfs),
            "ses" => Ok(SearchPolicy::Ses),
            other => Err(SearchError::UnknownPolicy(other.to_string())),
        }
    }

    pub fn build(&self) -> Box<dyn SelectionPolicy> {
        let params = match self {
            SearchPolicy::Mcts(p) => *p,
            _ => UctParams::default(),
        };
        PolicyRegistry::with_builtins()
            .create(self.name(), &params)
            .expect("built-in policies are registered")
    }
}

pub fn select_node(tree: &ExperimentTree, policy: &SearchPolicy) -> Result<NodeId, SearchError> {
    policy.build().select(tree)
}

/// Creates the root node from a baseline plan.
pub fn plant_root(tree: &mut ExperimentTree, plan: ExperimentPlan) -> Result<NodeId, SearchError> {
    if !tree.is_empty() {
        return Err(SearchError::TreeNotEmpty);
    }
    if plan.strategy != StrategyKind::EstablishBaseline {
        return Err(SearchError::IllegalStrategy(format!(
            "the root must establish a baseline, got {}",
            plan.strategy
        )));
    }
    Ok(tree.insert(None, Some(plan)))
}

/// Creates a root whose plan could not be produced; it completes as Failed.
pub fn plant_unplanned_root(tree: &mut ExperimentTree, error: String) -> Result<NodeId, SearchError> {
    if !tree.is_empty() {
        return Err(SearchError::TreeNotEmpty);
    }
    let id = tree.insert(None, None);
    tree.get_mut(id).expect("just inserted").error = Some(error);
    Ok(id)
}

fn check_parent(tree: &ExperimentTree, parent: NodeId) -> Result<(), SearchError> {
    let p = tree.get(parent).ok_or(SearchError::UnknownNode(parent))?;
    if p.status != NodeStatus::Done {
        return Err(SearchError::ParentNotDone(parent));
    }
    Ok(())
}

/// Appends a pending child of `parent` carrying `plan`.
pub fn expand(
    tree: &mut ExperimentTree,
    parent: NodeId,
    plan: ExperimentPlan,
) -> Result<NodeId, SearchError> {
    check_parent(tree, parent)?;
    if plan.strategy == StrategyKind::EstablishBaseline {
        return Err(SearchError::IllegalStrategy(
            "Establish Baseline is only legal at the root".into(),
        ));
    }
    Ok(tree.insert(Some(parent), Some(plan)))
}

/// Appends a pending child whose plan generation failed; it completes as
/// Failed with reward 0.
pub fn expand_unplanned(
    tree: &mut ExperimentTree,
    parent: NodeId,
    error: String,
) -> Result<NodeId, SearchError> {
    check_parent(tree, parent)?;
    let id = tree.insert(Some(parent), None);
    tree.get_mut(id).expect("just inserted").error = Some(error);
    Ok(id)
}

pub fn mark_running(tree: &mut ExperimentTree, id: NodeId) -> Result<(), SearchError> {
    let node = tree.get_mut(id).ok_or(SearchError::UnknownNode(id))?;
    if node.status.is_complete() {
        return Err(SearchError::AlreadyComplete(id));
    }
    node.status = NodeStatus::Running;
    Ok(())
}

/// How a node's experiment ended.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Completion {
    Done(f64),
    Failed,
}

/// Completes `id` and adds one visit plus its reward to it and every
/// ancestor. Failed experiments count as a visit with reward 0.
pub fn backpropagate(
    tree: &mut ExperimentTree,
    id: NodeId,
    completion: Completion,
) -> Result<(), SearchError> {
    let node = tree.get(id).ok_or(SearchError::UnknownNode(id))?;
    if node.status.is_complete() {
        return Err(SearchError::AlreadyComplete(id));
    }
    let (status, reward) = match completion {
        Completion::Done(r) => {
            if !(0.0..=1.0).contains(&r) {
                return Err(SearchError::InvalidReward(r));
            }
            (NodeStatus::Done, r)
        }
        Completion::Failed => (NodeStatus::Failed, 0.0),
    };
    {
        let node = tree.get_mut(id).expect("checked above");
        node.status = status;
        node.reward = Some(reward);
    }
    let mut cursor = Some(id);
    while let Some(cur) = cursor {
        let n = tree.get_mut(cur).ok_or(SearchError::UnknownNode(cur))?;
        n.visits += 1;
        n.total_reward += reward;
        cursor = n.parent;
    }
    Ok(())
}

/// Wraps a hyperparameter grid into the root baseline plan. Grids larger than
/// `max_parallel_configs` run as consecutive batches under the same node.
pub fn run_baseline_grid(
    task: &TaskDefinition,
    grid: Vec<TrainingConfig>,
    mission: impl Into<String>,
) -> Result<ExperimentPlan, SearchError> {
    if grid.is_empty() {
        return Err(SearchError::EmptyGrid);
    }
    let limit = task.constraints.max_baseline_grid.max(task.constraints.max_parallel_configs);
    if grid.len() > limit {
        return Err(SearchError::GridTooLarge { size: grid.len(), limit });
    }
    Ok(ExperimentPlan {
        mission: mission.into(),
        strategy: StrategyKind::EstablishBaseline,
        data_spec: Default::default(),
        configs: grid,
        rationale: "grid search over training hyperparameters".into(),
    })
}
