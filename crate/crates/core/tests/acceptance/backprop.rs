use arbor_core::search::{backpropagate, expand, mark_running, plant_root, Completion};
use arbor_core::{ExperimentTree, NodeId, NodeStatus, StrategyKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::trees::plan;
use crate::{ensure, Outcome};

/// Every node's N equals the completed nodes in its subtree and its Q their
/// summed rewards.
fn conserved(tree: &ExperimentTree) -> Result<(), String> {
    for n in tree.nodes() {
        let (mut visits, mut reward) = (0u64, 0.0f64);
        let mut stack = vec![n.id];
        while let Some(id) = stack.pop() {
            let m = tree.get(id).unwrap();
            if m.status.is_complete() {
                visits += 1;
                reward += m.reward.unwrap_or(0.0);
            }
            stack.extend(m.children.iter().copied());
        }
        ensure!(n.visits == visits, "{}: N={} but {visits} completed nodes below", n.id, n.visits);
        ensure!((n.total_reward - reward).abs() <= 1e-9, "{}: Q={} but rewards sum to {reward}", n.id, n.total_reward);
    }
    Ok(())
}

pub fn check() -> Outcome {
    let runs = 50;
    let steps = 200;
    for seed in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut tree = ExperimentTree::new();
        let root = plant_root(&mut tree, plan(StrategyKind::EstablishBaseline, &mut rng)).unwrap();
        backpropagate(&mut tree, root, Completion::Done(rng.gen_range(0.0..=1.0))).unwrap();
        let mut open: Vec<NodeId> = Vec::new();
        for step in 0..steps {
            let done: Vec<NodeId> = tree.nodes().filter(|n| n.status == NodeStatus::Done).map(|n| n.id).collect();
            match rng.gen_range(0..4) {
                0 | 1 => {
                    let parent = done[rng.gen_range(0..done.len())];
                    open.push(expand(&mut tree, parent, plan(StrategyKind::AdjustTrainingScheme, &mut rng)).unwrap());
                }
                2 if !open.is_empty() => {
                    let id = open[rng.gen_range(0..open.len())];
                    let _ = mark_running(&mut tree, id);
                }
                _ if !open.is_empty() => {
                    let id = open.swap_remove(rng.gen_range(0..open.len()));
                    let before = tree.get(tree.root().unwrap()).unwrap().visits;
                    let completion = if rng.gen_bool(0.2) { Completion::Failed } else { Completion::Done(rng.gen_range(0.0..=1.0)) };
                    backpropagate(&mut tree, id, completion).map_err(|e| format!("run {seed} step {step}: {e}"))?;
                    ensure!(backpropagate(&mut tree, id, Completion::Done(0.5)).is_err(), "run {seed}: completed twice");
                    ensure!(tree.get(tree.root().unwrap()).unwrap().visits == before + 1, "run {seed}: root gained != 1 visit");
                }
                _ => {}
            }
            if let Some(&id) = open.first() {
                let snapshot = tree.clone();
                ensure!(backpropagate(&mut tree, id, Completion::Done(1.5)).is_err(), "run {seed}: reward 1.5 accepted");
                ensure!(tree == snapshot, "run {seed}: a rejected update changed the tree");
            }
            conserved(&tree).map_err(|e| format!("run {seed} step {step}: {e}"))?;
        }
    }
    Ok(format!("{runs} runs x {steps} random steps, invariants checked after every step"))
}
