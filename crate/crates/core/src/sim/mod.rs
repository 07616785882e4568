//! Offline stand-ins for training: seeded synthetic landscapes, an executor
//! that scores configurations on them, and an LLM-free researcher.
//!
//! Every random draw comes from a stream keyed by the master seed, the node
//! id and the config id (see [`crate::seed`]), so a node's result does not
//! depend on execution order or on how many other nodes ran before it.

pub mod landscape;
pub mod researcher;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::agents::executor::{delegate_plan, ConfigRun, ExecError, Executor};
use crate::aidp::OperatorRegistry;
use crate::diagnostics::EvalOutput;
use crate::model::{ConfigOutcome, ExperimentPlan, ExperimentResult, NodeId, TrainingConfig};
use crate::seed::stream;

pub use landscape::{features, Landscape};
pub use researcher::ScriptedResearcher;

/// Scores configurations on a [`Landscape`]. The data pipeline is validated
/// but not materialized.
pub struct SimulatedExecutor {
    pub landscape: Arc<Landscape>,
    pub master_seed: u64,
    pub max_train_samples: usize,
    pub registry: Arc<OperatorRegistry>,
}

impl SimulatedExecutor {
    pub fn new(landscape: Arc<Landscape>, master_seed: u64, max_train_samples: usize) -> Self {
        Self { landscape, master_seed, max_train_samples, registry: Arc::new(OperatorRegistry::with_builtins()) }
    }

    fn rng(&self, purpose: &str, node: NodeId, config: &TrainingConfig) -> crate::seed::StreamRng {
        stream(self.master_seed, &format!("{purpose}/{}", config.config_id), &[node.0])
    }
}

/// Synthetic validation outputs for a config that scored `score`: each case
/// is correct with probability `score`; failures are format errors (more
/// likely at high learning rates), truncations (more likely with few epochs)
/// or hallucinations.
fn eval_outputs(rng: &mut impl Rng, n: usize, score: f64, x: &landscape::Features) -> Vec<EvalOutput> {
    let weights = [x[0].clamp(0.0, 1.0) + 0.1, (1.0 - x[1]).clamp(0.0, 1.0) + 0.1, 0.5];
    let total: f64 = weights.iter().sum();
    (0..n)
        .map(|i| {
            let expected = format!("answer-{i}");
            let input = format!("validation question {i}");
            if rng.gen::<f64>() < score {
                return EvalOutput { input, expected: expected.clone(), actual: expected, score: Some(1.0) };
            }
            let mut pick = rng.gen::<f64>() * total;
            let mut kind = 0;
            while kind < 2 && pick >= weights[kind] {
                pick -= weights[kind];
                kind += 1;
            }
            let actual = match kind {
                0 => format!("{{\"ans\": answer-{i} (unparseable format)"),
                1 => "answ...".to_string(),
                _ => format!("answer-{} with an invented citation", i + 1000),
            };
            EvalOutput { input, expected, actual, score: Some(0.0) }
        })
        .collect()
}

impl Executor for SimulatedExecutor {
    fn name(&self) -> &str {
        "simulated"
    }

    fn prepare_data(&self, _node: NodeId, plan: &ExperimentPlan) -> Result<(), ExecError> {
        plan.data_spec
            .validate(&self.registry)
            .map_err(|e| ExecError::PipelineFailed { step: e.step_index(), message: e.to_string() })
    }

    fn run_config(
        &self,
        node: NodeId,
        _index: usize,
        config: &TrainingConfig,
        plan: &ExperimentPlan,
    ) -> Result<ConfigRun, ExecError> {
        let l = &self.landscape;
        let x = features(config, self.max_train_samples);
        let wall_time = 600.0 * config.epochs * (0.25 + x[2].clamp(0.0, 1.0));
        if self.rng("sim_failure", node, config).gen::<f64>() < l.failure_prob {
            let mut run = ConfigRun::failed(&config.config_id, "simulated crash: CUDA out of memory during training");
            run.wall_time = wall_time / 2.0;
            return Ok(run);
        }
        let noise = if l.noise_sigma > 0.0 {
            Normal::new(0.0, l.noise_sigma).expect("sigma validated").sample(&mut self.rng("sim_noise", node, config))
        } else {
            0.0
        };
        let score = (l.score(&x, Some(plan.strategy)) + noise).clamp(0.0, 1.0);
        let outputs = eval_outputs(&mut self.rng("sim_eval", node, config), l.eval_cases, score, &x);
        let mut outcome = ConfigOutcome::ok(&config.config_id, score);
        outcome.log_excerpt = format!("simulated training finished; score = {score:.4}");
        Ok(ConfigRun { outcome, eval_outputs: outputs, wall_time })
    }
}

/// Runs `plan` for `node` on the landscape with every config in one batch.
pub fn simulate_experiment(
    plan: &ExperimentPlan,
    landscape: Arc<Landscape>,
    master_seed: u64,
    max_train_samples: usize,
    node: NodeId,
) -> Result<ExperimentResult, ExecError> {
    let exec = SimulatedExecutor::new(landscape, master_seed, max_train_samples);
    Ok(delegate_plan(plan, &exec, node, plan.configs.len().max(1))?.result)
}
