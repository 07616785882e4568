//! The Executor side of a plan: build the data, train every configuration,
//! evaluate, and aggregate one [`ExperimentResult`].

use std::time::Instant;

use thiserror::Error;

use crate::diagnostics::EvalOutput;
use crate::model::{ConfigOutcome, ExperimentPlan, ExperimentResult, NodeId, TrainingConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecError {
    /// Fatal for the node. `step` is the failing pipeline step when known.
    #[error("data pipeline failed{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    PipelineFailed { step: Option<usize>, message: String },
    #[error("executor unavailable: {0}")]
    ExecutorUnavailable(String),
}

/// One configuration's outcome plus the evaluation outputs diagnostics reads.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigRun {
    pub outcome: ConfigOutcome,
    pub eval_outputs: Vec<EvalOutput>,
    /// Seconds of (possibly simulated) training and evaluation.
    pub wall_time: f64,
}

impl ConfigRun {
    pub fn failed(config_id: &str, log: impl Into<String>) -> Self {
        Self { outcome: ConfigOutcome::failed(config_id, log), eval_outputs: Vec::new(), wall_time: 0.0 }
    }
}

pub trait Executor: Send + Sync {
    fn name(&self) -> &str;

    /// Runs or checks the plan's data pipeline before any training starts.
    fn prepare_data(&self, node: NodeId, plan: &ExperimentPlan) -> Result<(), ExecError>;

    /// Trains and evaluates one configuration. Failures belong in the returned
    /// outcome; only infrastructure loss is an error.
    fn run_config(
        &self,
        node: NodeId,
        index: usize,
        config: &TrainingConfig,
        plan: &ExperimentPlan,
    ) -> Result<ConfigRun, ExecError>;

    /// Called once the node's result is known.
    fn finish_node(&self, _node: NodeId, _result: &ExperimentResult) -> Result<(), ExecError> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Delegation {
    pub result: ExperimentResult,
    /// Evaluation outputs of the best configuration (empty if all failed).
    pub eval_outputs: Vec<EvalOutput>,
}

/// Runs the plan on `executor`: the pipeline first, then the configurations in
/// batches of `max_workers` run concurrently. Results are joined in plan
/// order. The reported wall time is the sum over batches of the slowest run.
pub fn delegate_plan(
    plan: &ExperimentPlan,
    executor: &dyn Executor,
    node: NodeId,
    max_workers: usize,
) -> Result<Delegation, ExecError> {
    let started = Instant::now();
    executor.prepare_data(node, plan)?;
    let mut runs: Vec<ConfigRun> = Vec::with_capacity(plan.configs.len());
    let mut wall_time = 0.0f64;
    let mut offset = 0;
    for batch in plan.batches(max_workers) {
        let results: Vec<Result<ConfigRun, ExecError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .enumerate()
                .map(|(i, config)| scope.spawn(move || executor.run_config(node, offset + i, config, plan)))
                .collect();
            handles
                .into_iter()
                .zip(batch)
                .map(|(h, c)| {
                    h.join().unwrap_or_else(|_| Ok(ConfigRun::failed(&c.config_id, "worker panicked")))
                })
                .collect()
        });
        let mut slowest = 0.0f64;
        for r in results {
            let r = r?;
            slowest = slowest.max(r.wall_time);
            runs.push(r);
        }
        wall_time += slowest;
        offset += batch.len();
    }
    log::debug!("node {node}: {} configs in {:?}", runs.len(), started.elapsed());
    let result = ExperimentResult::from_outcomes(runs.iter().map(|r| r.outcome.clone()).collect(), wall_time);
    let eval_outputs = result
        .best_config_id
        .as_deref()
        .and_then(|id| runs.iter().find(|r| r.outcome.config_id == id))
        .map(|r| r.eval_outputs.clone())
        .unwrap_or_default();
    Ok(Delegation { result, eval_outputs })
}
