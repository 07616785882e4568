//! A researcher that needs no model: seeded perturbations of the selected
//! node's best configuration.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::agents::plan::{render_plan, PlanDocument};
use crate::agents::researcher::{ResearchError, ResearchRequest, Researcher, StrategyChoice};
use crate::aidp::{PipelineSpec, PipelineStep};
use crate::memory::best_config;
use crate::model::{ExperimentPlan, FinetuningType, Scalar, StrategyKind, TrainingConfig};
use crate::seed::stream;
use crate::sim::landscape::{epochs_of, features, learning_rate_of, Features, DIMS};

pub const BASE_DATASET: &str = "datasets/base.jsonl";

/// Draws for node `n` come from the streams `researcher_strategy` and
/// `researcher` keyed by `[n]`, so a plan depends only on the master seed,
/// the new node id and the selected node.
#[derive(Clone, Debug)]
pub struct ScriptedResearcher {
    /// Standard deviation of a perturbation on a strategy's own dimensions.
    pub step: f64,
    /// Standard deviation on the remaining dimensions.
    pub side_step: f64,
    /// Probability of switching away from the parent's strategy.
    pub switch_prob: f64,
    pub configs_per_plan: usize,
    /// Feature points of the root grid.
    pub baseline_grid: Vec<Features>,
}

impl Default for ScriptedResearcher {
    fn default() -> Self {
        Self {
            step: 0.12,
            side_step: 0.04,
            switch_prob: 0.3,
            configs_per_plan: 3,
            baseline_grid: vec![
                [1.0 / 3.0, 0.5, 0.5, 0.5],
                [2.0 / 3.0, 0.5, 0.5, 0.5],
                [1.0, 0.5, 0.5, 0.5],
                [2.0 / 3.0, 0.0, 0.5, 0.5],
                [2.0 / 3.0, 1.0, 0.5, 0.5],
            ],
        }
    }
}

/// Dimensions a strategy moves with the full step.
pub fn strategy_dims(s: StrategyKind) -> &'static [usize] {
    match s {
        StrategyKind::EstablishBaseline => &[],
        StrategyKind::AdjustTrainingScheme => &[0, 1],
        StrategyKind::RefineDataPipeline => &[2],
        StrategyKind::ConstructSyntheticData => &[3],
    }
}

fn round_sig(v: f64, digits: i32) -> f64 {
    if v == 0.0 {
        return 0.0;
    }
    let scale = 10f64.powi(digits - 1 - v.abs().log10().floor() as i32);
    (v * scale).round() / scale
}

fn config_at(id: String, x: &Features, dataset: &str, max_samples: usize) -> TrainingConfig {
    let mut extra = std::collections::BTreeMap::new();
    let frac = x[2].clamp(0.01, 1.0);
    extra.insert("train_samples".to_string(), Scalar::Int((frac * max_samples as f64).round().max(1.0) as i64));
    extra.insert("mix_ratio".to_string(), Scalar::Float((x[3].clamp(0.0, 1.0) * 1000.0).round() / 1000.0));
    TrainingConfig {
        config_id: id,
        finetuning_type: FinetuningType::Lora,
        learning_rate: round_sig(learning_rate_of(x[0]), 4),
        epochs: (epochs_of(x[1].max(-0.2)) * 100.0).round() / 100.0,
        per_device_batch: 4,
        grad_accum: 4,
        cutoff_len: 2048,
        adapter_rank: Some(16),
        dataset_path: dataset.to_string(),
        base_model_path: "base".into(),
        extra,
    }
}

fn data_spec(strategy: StrategyKind, node: u64, seed: u64, samples: i64) -> (PipelineSpec, String) {
    let step = |op: &str, inputs: &[&str], output: &str, params: serde_json::Value| PipelineStep {
        op: op.into(),
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
        output: output.into(),
        params,
    };
    let load = step("load_local_dataset", &[], "base", json!({ "path": BASE_DATASET }));
    let (steps, name, last) = match strategy {
        StrategyKind::RefineDataPipeline => (
            vec![
                load,
                step("deduplicate_by_text_hash", &["base"], "dedup", json!({ "field": "all" })),
                step("select_by_random", &["dedup"], "subset", json!({ "n": samples })),
            ],
            format!("n{node}_refined"),
            "subset",
        ),
        StrategyKind::ConstructSyntheticData => (
            vec![
                load,
                step(
                    "generate_dataset_with_llm",
                    &["base"],
                    "synthetic",
                    json!({ "template": "Write a new training example in the style of: {user}", "n": 1000 }),
                ),
                step("concatenate", &["base", "synthetic"], "mixed", serde_json::Value::Null),
            ],
            format!("n{node}_mixed"),
            "mixed",
        ),
        _ => return (PipelineSpec::default(), BASE_DATASET.to_string()),
    };
    let path = PipelineSpec::output_path(&name);
    (PipelineSpec { seed, steps, outputs: [(name, last.to_string())].into_iter().collect() }, path)
}

impl ScriptedResearcher {
    fn baseline(&self, req: &ResearchRequest<'_>) -> ExperimentPlan {
        let max = req.task.constraints.max_train_samples;
        ExperimentPlan {
            mission: format!("Establish a baseline for {} with a hyperparameter grid.", req.task.task_id),
            strategy: StrategyKind::EstablishBaseline,
            data_spec: PipelineSpec::default(),
            configs: self
                .baseline_grid
                .iter()
                .enumerate()
                .map(|(i, x)| config_at(format!("grid-{i}"), x, BASE_DATASET, max))
                .collect(),
            rationale: "grid search over training hyperparameters".into(),
        }
    }

    fn refinement(&self, choice: &StrategyChoice, req: &ResearchRequest<'_>) -> ExperimentPlan {
        let max = req.task.constraints.max_train_samples;
        let parent = req.parent.and_then(|p| req.tree.get(p));
        let origin = parent
            .and_then(best_config)
            .map(|c| features(c, max))
            .unwrap_or(self.baseline_grid.first().copied().unwrap_or([0.5; DIMS]));
        let mut rng = stream(req.master_seed, "researcher", &[req.new_node.0]);
        let own = strategy_dims(choice.strategy);
        let main = Normal::new(0.0, self.step).expect("step >= 0");
        let side = Normal::new(0.0, self.side_step).expect("side_step >= 0");
        let points: Vec<Features> = (0..self.configs_per_plan.max(1))
            .map(|_| {
                let mut x = origin;
                for (d, v) in x.iter_mut().enumerate() {
                    *v += if own.contains(&d) { main.sample(&mut rng) } else { side.sample(&mut rng) };
                }
                x
            })
            .collect();
        let samples = points.iter().map(|x| (x[2].clamp(0.01, 1.0) * max as f64).round() as i64).max().unwrap_or(1);
        let spec_seed = rng.gen::<u32>() as u64;
        let (spec, path) = data_spec(choice.strategy, req.new_node.0, spec_seed, samples);
        ExperimentPlan {
            mission: format!(
                "{}: perturb the best configuration of node {}.",
                choice.strategy,
                req.parent.map_or("-".to_string(), |p| p.to_string())
            ),
            strategy: choice.strategy,
            data_spec: spec,
            configs: points
                .iter()
                .enumerate()
                .map(|(i, x)| config_at(format!("n{}-c{i}", req.new_node.0), x, &path, max))
                .collect(),
            rationale: choice.rationale.clone(),
        }
    }
}

impl Researcher for ScriptedResearcher {
    fn name(&self) -> &str {
        "scripted"
    }

    fn propose_strategy(&self, req: &ResearchRequest<'_>) -> Result<StrategyChoice, ResearchError> {
        let mut rng = stream(req.master_seed, "researcher_strategy", &[req.new_node.0]);
        let inherited = req
            .parent
            .and_then(|p| req.tree.get(p))
            .and_then(|n| n.strategy())
            .filter(|s| *s != StrategyKind::EstablishBaseline);
        let switch = rng.gen::<f64>() < self.switch_prob;
        let strategy = match inherited {
            Some(s) if !switch => s,
            _ => *StrategyKind::REFINEMENTS.choose(&mut rng).expect("non-empty"),
        };
        Ok(StrategyChoice { strategy, rationale: format!("scripted choice for node {}", req.new_node) })
    }

    fn draft_plan(
        &self,
        choice: &StrategyChoice,
        req: &ResearchRequest<'_>,
        _feedback: Option<&str>,
    ) -> Result<PlanDocument, ResearchError> {
        let plan = if req.at_root() { self.baseline(req) } else { self.refinement(choice, req) };
        Ok(render_plan(&plan))
    }
}
