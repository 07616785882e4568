//! The condensed history handed to the researcher each iteration: the path
//! from the root to the selected node, the node's siblings, and the critical
//! experiments of the whole tree, rendered as plain text under fixed headers.
//!
//! Rendered layout (headers are verbatim):
//!
//! ```text
//! === Trajectory (root to current) ===
//! - #1 [Done] Establish Baseline | score 0.412000 | reward 0.4120
//!   plan: ...
//! === Critical experiments ===
//! ...
//! === Sibling attempts ===
//! (none)
//! ```
//!
//! Lengths are counted in characters. At roughly four characters per token
//! the default 16000-character budget is about 4000 tokens.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ExperimentNode, ExperimentTree, NodeId, NodeStatus, Scalar, StrategyKind, TrainingConfig};
use crate::util::{clip, one_line};

pub const SUMMARY_CAP: usize = 1200;
pub const DEFAULT_BUDGET: usize = 16_000;
pub const CHARS_PER_TOKEN: usize = 4;

pub const PATH_HEADER: &str = "=== Trajectory (root to current) ===";
pub const CRITICAL_HEADER: &str = "=== Critical experiments ===";
pub const SIBLING_HEADER: &str = "=== Sibling attempts ===";

const PLAN_DIGEST_CAP: usize = 200;
const DIAGNOSIS_DIGEST_CAP: usize = 480;

#[derive(Debug, Error, PartialEq)]
pub enum MemoryError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("budget of {budget} characters cannot hold the path endpoints ({needed} needed)")]
    BudgetTooSmall { needed: usize, budget: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalThresholds {
    pub gain_threshold: f64,
    pub max_failed: usize,
    pub cap: usize,
}

impl Default for CriticalThresholds {
    fn default() -> Self {
        Self { gain_threshold: 0.1, max_failed: 2, cap: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node_id: NodeId,
    pub strategy: Option<StrategyKind>,
    pub plan_digest: String,
    pub config_deltas: Vec<String>,
    pub best_raw_score: Option<f64>,
    pub reward: Option<f64>,
    pub diagnosis: Option<String>,
    pub status: NodeStatus,
    pub error: Option<String>,
}

/// The configuration behind a node's best score, or its first one.
pub fn best_config(node: &ExperimentNode) -> Option<&TrainingConfig> {
    let plan = node.plan.as_ref()?;
    let best = node.result.as_ref().and_then(|r| r.best_config_id.as_deref());
    best.and_then(|id| plan.configs.iter().find(|c| c.config_id == id)).or_else(|| plan.configs.first())
}

fn config_deltas(cur: &TrainingConfig, base: &TrainingConfig) -> Vec<String> {
    let mut out = Vec::new();
    let mut diff = |name: &str, a: String, b: String| {
        if a != b {
            out.push(format!("{name} {b} -> {a}"));
        }
    };
    diff("finetuning_type", format!("{:?}", cur.finetuning_type), format!("{:?}", base.finetuning_type));
    diff("learning_rate", format!("{:e}", cur.learning_rate), format!("{:e}", base.learning_rate));
    diff("epochs", cur.epochs.to_string(), base.epochs.to_string());
    diff("per_device_batch", cur.per_device_batch.to_string(), base.per_device_batch.to_string());
    diff("grad_accum", cur.grad_accum.to_string(), base.grad_accum.to_string());
    diff("cutoff_len", cur.cutoff_len.to_string(), base.cutoff_len.to_string());
    let rank = |r: Option<u32>| r.map_or("none".to_string(), |r| r.to_string());
    diff("adapter_rank", rank(cur.adapter_rank), rank(base.adapter_rank));
    diff("dataset", cur.dataset_path.clone(), base.dataset_path.clone());
    diff("base_model", cur.base_model_path.clone(), base.base_model_path.clone());
    let keys: BTreeSet<&String> = cur.extra.keys().chain(base.extra.keys()).collect();
    let show = |v: Option<&Scalar>| v.map_or("unset".to_string(), |v| v.to_string());
    for k in keys {
        diff(k, show(cur.extra.get(k)), show(base.extra.get(k)));
    }
    out
}

impl NodeSummary {
    pub fn of(tree: &ExperimentTree, node: &ExperimentNode) -> Self {
        let parent = node.parent.and_then(|p| tree.get(p));
        let config_deltas = match (best_config(node), parent.and_then(best_config)) {
            (Some(c), Some(p)) => config_deltas(c, p),
            _ => Vec::new(),
        };
        Self {
            node_id: node.id,
            strategy: node.strategy(),
            plan_digest: node
                .plan
                .as_ref()
                .map(|p| clip(&one_line(&p.mission), PLAN_DIGEST_CAP))
                .unwrap_or_else(|| "(no plan)".into()),
            config_deltas,
            best_raw_score: node.best_raw_score(),
            reward: node.reward,
            diagnosis: node.diagnosis.as_ref().map(|d| clip(&one_line(d), DIAGNOSIS_DIGEST_CAP)),
            status: node.status,
            error: node.error.as_ref().map(|e| clip(&one_line(e), PLAN_DIGEST_CAP)),
        }
    }

    /// At most [`SUMMARY_CAP`] characters, ending in a newline.
    pub fn render(&self) -> String {
        let mut s = format!("- {} [{}]", self.node_id, self.status);
        if let Some(st) = self.strategy {
            let _ = write!(s, " {st}");
        }
        if let Some(b) = self.best_raw_score {
            let _ = write!(s, " | score {b:.6}");
        }
        if let Some(r) = self.reward {
            let _ = write!(s, " | reward {r:.4}");
        }
        let _ = write!(s, "\n  plan: {}", self.plan_digest);
        if !self.config_deltas.is_empty() {
            let _ = write!(s, "\n  changes: {}", self.config_deltas.join("; "));
        }
        if let Some(d) = &self.diagnosis {
            let _ = write!(s, "\n  diagnosis: {d}");
        }
        if let Some(e) = &self.error {
            let _ = write!(s, "\n  error: {e}");
        }
        let mut s = clip(&s, SUMMARY_CAP - 1);
        s.push('\n');
        s
    }
}

/// The sets that feed the context for `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub path: Vec<NodeId>,
    pub siblings: Vec<NodeId>,
    pub critical: Vec<NodeId>,
}

pub fn collect_components(
    tree: &ExperimentTree,
    v: NodeId,
    thresholds: &CriticalThresholds,
) -> Result<Components, MemoryError> {
    let node = tree.get(v).ok_or(MemoryError::UnknownNode(v))?;
    let path = tree.path_from_root(v).ok_or(MemoryError::UnknownNode(v))?;
    let siblings = node
        .parent
        .and_then(|p| tree.get(p))
        .map(|p| p.children.iter().copied().filter(|c| *c != v).collect())
        .unwrap_or_default();
    Ok(Components { path, siblings, critical: select_critical(tree, thresholds) })
}

/// Reward change of a completed node relative to its parent's own reward.
/// Failed nodes count as reward 0.
pub fn reward_delta(tree: &ExperimentTree, node: &ExperimentNode) -> Option<f64> {
    if !node.status.is_complete() {
        return None;
    }
    let parent = tree.get(node.parent?)?;
    Some(node.reward.unwrap_or(0.0) - parent.reward?)
}

/// The global best Done node first, then up to `cap - 1` more nodes ranked by
/// |reward delta| descending and newer first on ties. Eligible are Done nodes
/// with |delta| >= `gain_threshold` and the `max_failed` most recent Failed
/// nodes.
pub fn select_critical(tree: &ExperimentTree, t: &CriticalThresholds) -> Vec<NodeId> {
    let best = tree
        .nodes()
        .filter(|n| n.status == NodeStatus::Done)
        .fold(None::<&ExperimentNode>, |acc, n| match acc {
            Some(a) if a.reward.unwrap_or(0.0) >= n.reward.unwrap_or(0.0) => Some(a),
            _ => Some(n),
        })
        .map(|n| n.id);
    let mut ranked: Vec<(f64, NodeId)> = tree
        .nodes()
        .filter(|n| Some(n.id) != best && n.status == NodeStatus::Done)
        .filter_map(|n| reward_delta(tree, n).map(|d| (d.abs(), n.id)))
        .filter(|(d, _)| *d >= t.gain_threshold)
        .collect();
    let failed: Vec<&ExperimentNode> = tree.nodes().filter(|n| n.status == NodeStatus::Failed).collect();
    for n in failed.iter().rev().take(t.max_failed) {
        ranked.push((reward_delta(tree, n).map_or(0.0, f64::abs), n.id));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    let mut out: Vec<NodeId> = best.into_iter().collect();
    out.extend(ranked.into_iter().map(|(_, id)| id));
    out.truncate(t.cap);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryContext {
    pub path_section: Vec<NodeSummary>,
    pub critical_section: Vec<NodeSummary>,
    pub sibling_section: Vec<NodeSummary>,
    pub total_budget: usize,
}

fn render_section(out: &mut String, header: &str, items: &[NodeSummary]) {
    out.push_str(header);
    out.push('\n');
    if items.is_empty() {
        out.push_str("(none)\n");
    }
    for s in items {
        out.push_str(&s.render());
    }
}

impl MemoryContext {
    pub fn render(&self) -> String {
        let mut out = String::new();
        render_section(&mut out, PATH_HEADER, &self.path_section);
        render_section(&mut out, CRITICAL_HEADER, &self.critical_section);
        render_section(&mut out, SIBLING_HEADER, &self.sibling_section);
        out
    }

    pub fn rendered_len(&self) -> usize {
        self.render().chars().count()
    }
}

/// Builds the context within `budget` characters. On overflow it drops
/// siblings (newest first), then critical entries (lowest ranked first), then
/// interior path entries (oldest first). The first and last path entries are
/// always kept.
pub fn condense(
    path: Vec<NodeSummary>,
    siblings: Vec<NodeSummary>,
    critical: Vec<NodeSummary>,
    budget: usize,
) -> Result<MemoryContext, MemoryError> {
    let mut ctx = MemoryContext { path_section: path, critical_section: critical, sibling_section: siblings, total_budget: budget };
    let minimal = MemoryContext {
        path_section: match ctx.path_section.len() {
            0 | 1 => ctx.path_section.clone(),
            n => vec![ctx.path_section[0].clone(), ctx.path_section[n - 1].clone()],
        },
        critical_section: Vec::new(),
        sibling_section: Vec::new(),
        total_budget: budget,
    };
    let needed = minimal.rendered_len();
    if needed > budget {
        return Err(MemoryError::BudgetTooSmall { needed, budget });
    }
    while ctx.rendered_len() > budget {
        if ctx.sibling_section.pop().is_some() || ctx.critical_section.pop().is_some() {
            continue;
        }
        debug_assert!(ctx.path_section.len() > 2, "the minimal context fits the budget");
        ctx.path_section.remove(1);
    }
    Ok(ctx)
}

/// Collects and condenses the context for `v` in one call.
pub fn memory_context(
    tree: &ExperimentTree,
    v: NodeId,
    thresholds: &CriticalThresholds,
    budget: usize,
) -> Result<MemoryContext, MemoryError> {
    let c = collect_components(tree, v, thresholds)?;
    let summarize = |ids: &[NodeId]| -> Vec<NodeSummary> {
        ids.iter().filter_map(|id| tree.get(*id)).map(|n| NodeSummary::of(tree, n)).collect()
    };
    condense(summarize(&c.path), summarize(&c.siblings), summarize(&c.critical), budget)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::search::{backpropagate, expand, expand_unplanned, plant_root, Completion};
    use crate::search::tests::{baseline, plan_with};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// A random completed tree with `n` nodes; about one in six fails.
    pub(crate) fn random_tree(seed: u64, n: usize) -> ExperimentTree {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut tree = ExperimentTree::new();
        let root = plant_root(&mut tree, baseline()).unwrap();
        backpropagate(&mut tree, root, Completion::Done(rng.gen_range(0.0..1.0))).unwrap();
        while tree.len() < n {
            let done: Vec<NodeId> = tree.nodes().filter(|n| n.status == NodeStatus::Done).map(|n| n.id).collect();
            let parent = done[rng.gen_range(0..done.len())];
            let id = if rng.gen_bool(0.05) {
                expand_unplanned(&mut tree, parent, "researcher produced no valid plan ".repeat(rng.gen_range(1..5))).unwrap()
            } else {
                expand(&mut tree, parent, plan_with(rng.gen_range(1..4), rng.gen_range(1e-5..1e-3))).unwrap()
            };
            let outcome = if rng.gen_bool(0.15) { Completion::Failed } else { Completion::Done(rng.gen_range(0.0..1.0)) };
            if rng.gen_bool(0.5) {
                tree.get_mut(id).unwrap().diagnosis = Some("x".repeat(rng.gen_range(0..2000)));
            }
            backpropagate(&mut tree, id, outcome).unwrap();
        }
        tree
    }

    fn chain() -> ExperimentTree {
        let mut tree = ExperimentTree::new();
        let r = plant_root(&mut tree, baseline()).unwrap();
        backpropagate(&mut tree, r, Completion::Done(0.5)).unwrap();
        let a = expand(&mut tree, r, plan_with(1, 1e-4)).unwrap();
        backpropagate(&mut tree, a, Completion::Done(0.5)).unwrap();
        let b = expand(&mut tree, a, plan_with(1, 2e-4)).unwrap();
        backpropagate(&mut tree, b, Completion::Done(0.5)).unwrap();
        tree
    }

    #[test]
    fn component_examples() {
        let tree = chain();
        let t = CriticalThresholds::default();
        let root = collect_components(&tree, NodeId(1), &t).unwrap();
        assert_eq!(root.path, vec![NodeId(1)]);
        assert!(root.siblings.is_empty());
        assert_eq!(collect_components(&tree, NodeId(3), &t).unwrap().path, vec![NodeId(1), NodeId(2), NodeId(3)]);
        assert_eq!(collect_components(&tree, NodeId(9), &t), Err(MemoryError::UnknownNode(NodeId(9))));

        let mut fan = ExperimentTree::new();
        let r = plant_root(&mut fan, baseline()).unwrap();
        backpropagate(&mut fan, r, Completion::Done(0.5)).unwrap();
        for _ in 0..3 {
            let c = expand(&mut fan, r, plan_with(1, 1e-4)).unwrap();
            backpropagate(&mut fan, c, Completion::Done(0.5)).unwrap();
        }
        assert_eq!(collect_components(&fan, NodeId(2), &t).unwrap().siblings, vec![NodeId(3), NodeId(4)]);
    }

    #[test]
    fn critical_examples() {
        let t = CriticalThresholds::default();
        assert_eq!(select_critical(&chain(), &t), vec![NodeId(1)]);

        let mut tree = chain();
        let c = expand(&mut tree, NodeId(3), plan_with(1, 3e-4)).unwrap();
        backpropagate(&mut tree, c, Completion::Done(0.8)).unwrap();
        let d = expand(&mut tree, NodeId(2), plan_with(1, 3e-4)).unwrap();
        backpropagate(&mut tree, d, Completion::Done(0.2)).unwrap();
        assert_eq!(select_critical(&tree, &t), vec![c, d]);
    }

    #[test]
    fn critical_top_five_matches_sort() {
        let mut tree = ExperimentTree::new();
        let r = plant_root(&mut tree, baseline()).unwrap();
        backpropagate(&mut tree, r, Completion::Done(0.5)).unwrap();
        let rewards = [0.9, 0.1, 0.75, 0.25, 0.65, 0.35, 0.62, 0.95];
        for rw in rewards {
            let c = expand(&mut tree, r, plan_with(1, 1e-4)).unwrap();
            backpropagate(&mut tree, c, Completion::Done(rw)).unwrap();
        }
        // Oracle: best node, then the rest sorted by |delta| desc, newest first on ties.
        let mut others: Vec<(f64, u64)> =
            rewards.iter().enumerate().map(|(i, r)| ((r - 0.5f64).abs(), i as u64 + 2)).filter(|(_, id)| *id != 9).collect();
        others.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(b.1.cmp(&a.1)));
        let mut want = vec![NodeId(9)];
        want.extend(others.iter().take(4).map(|(_, id)| NodeId(*id)));
        assert_eq!(select_critical(&tree, &CriticalThresholds::default()), want);
    }

    #[test]
    fn condense_examples() {
        let tree = random_tree(3, 20);
        let v = NodeId(20);
        let ctx = memory_context(&tree, v, &CriticalThresholds::default(), DEFAULT_BUDGET).unwrap();
        let text = ctx.render();
        assert!(text.chars().count() <= DEFAULT_BUDGET);
        assert_eq!(ctx.path_section.first().unwrap().node_id, NodeId(1));
        assert_eq!(ctx.path_section.last().unwrap().node_id, v);

        let small = chain();
        let ctx = memory_context(&small, NodeId(3), &CriticalThresholds::default(), 1_000_000).unwrap();
        assert_eq!(ctx.path_section.len(), 3);
        let s = |id| NodeSummary::of(&small, small.get(NodeId(id)).unwrap());
        let full = condense(vec![s(1), s(3)], vec![s(2)], vec![s(1)], 1_000_000).unwrap();
        let tight = full.rendered_len() - 1;
        let cut = condense(vec![s(1), s(3)], vec![s(2)], vec![s(1)], tight).unwrap();
        assert!(cut.sibling_section.is_empty());
        assert_eq!(cut.critical_section.len(), 1);
        assert!(matches!(condense(vec![s(1), s(3)], vec![], vec![], 50), Err(MemoryError::BudgetTooSmall { .. })));
    }

    #[test]
    fn summaries_are_capped() {
        let tree = random_tree(11, 15);
        for n in tree.nodes() {
            assert!(NodeSummary::of(&tree, n).render().chars().count() <= SUMMARY_CAP);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn budget_and_priority_hold(seed in any::<u64>(), n in 1usize..20, budget in 600usize..6000) {
            let tree = random_tree(seed, n);
            let v = NodeId(1 + seed % n as u64);
            if let Ok(ctx) = memory_context(&tree, v, &CriticalThresholds::default(), budget) {
                prop_assert!(ctx.rendered_len() <= budget);
                prop_assert_eq!(ctx.render(), memory_context(&tree, v, &CriticalThresholds::default(), budget).unwrap().render());
                let wanted = select_critical(&tree, &CriticalThresholds::default());
                if !ctx.sibling_section.is_empty() {
                    prop_assert_eq!(ctx.critical_section.len(), wanted.len());
                }
                prop_assert_eq!(ctx.path_section.first().unwrap().node_id, NodeId(1));
                prop_assert_eq!(ctx.path_section.last().unwrap().node_id, v);
            }
        }
    }
}
