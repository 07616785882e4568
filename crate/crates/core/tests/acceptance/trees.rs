//! Random experiment trees built through the public search API.

use arbor_core::model::FinetuningType;
use arbor_core::search::{backpropagate, expand, expand_unplanned, plant_root, Completion};
use arbor_core::{ExperimentPlan, ExperimentTree, NodeId, NodeStatus, StrategyKind, TrainingConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn config(id: usize, lr: f64) -> TrainingConfig {
    TrainingConfig {
        config_id: format!("c{id}"),
        finetuning_type: FinetuningType::Lora,
        learning_rate: lr,
        epochs: 1.0 + (id % 3) as f64,
        per_device_batch: 4,
        grad_accum: 4,
        cutoff_len: 2048,
        adapter_rank: Some(16),
        dataset_path: "datasets/base.jsonl".into(),
        base_model_path: "base".into(),
        extra: Default::default(),
    }
}

pub fn plan(strategy: StrategyKind, rng: &mut ChaCha8Rng) -> ExperimentPlan {
    let words = rng.gen_range(1..40);
    ExperimentPlan {
        mission: "tune the data mix and schedule ".repeat(words),
        strategy,
        data_spec: Default::default(),
        configs: (0..rng.gen_range(1..4)).map(|i| config(i, rng.gen_range(1e-5..1e-3))).collect(),
        rationale: String::new(),
    }
}

/// A tree of `n` completed nodes; parents are drawn uniformly from Done
/// nodes. Roughly one node in six fails and one in twenty has no plan.
pub fn random_tree(seed: u64, n: usize) -> ExperimentTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = ExperimentTree::new();
    let root = plant_root(&mut tree, plan(StrategyKind::EstablishBaseline, &mut rng)).unwrap();
    backpropagate(&mut tree, root, Completion::Done(rng.gen_range(0.0..1.0))).unwrap();
    while tree.len() < n {
        let done: Vec<NodeId> = tree.nodes().filter(|x| x.status == NodeStatus::Done).map(|x| x.id).collect();
        let parent = done[rng.gen_range(0..done.len())];
        let id = if rng.gen_bool(0.05) {
            expand_unplanned(&mut tree, parent, "researcher reply had no plan block ".repeat(rng.gen_range(1..6))).unwrap()
        } else {
            let strategy = StrategyKind::REFINEMENTS[rng.gen_range(0..3)];
            expand(&mut tree, parent, plan(strategy, &mut rng)).unwrap()
        };
        if rng.gen_bool(0.5) {
            tree.get_mut(id).unwrap().diagnosis = Some("loss plateaued; ".repeat(rng.gen_range(0..150)));
        }
        let outcome = if rng.gen_bool(0.15) { Completion::Failed } else { Completion::Done(rng.gen_range(0.0..1.0)) };
        backpropagate(&mut tree, id, outcome).unwrap();
    }
    tree
}
