//! The outer loop: select, plan, execute, diagnose, backpropagate.
//!
//! Every state transition (node planted, node running, node completed) is
//! persisted before the loop moves on. A run started against a workspace that
//! already holds state resumes it: an in-flight node is executed again from
//! its stored plan and the loop continues until the budget is spent. All
//! randomness is keyed by the master seed and node ids, so a resumed run
//! produces the same tree as an uninterrupted one.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::agents::chat::ChatBackend;
use crate::agents::executor::{delegate_plan, ExecError, Executor};
use crate::agents::plan::{render_plan, PlanRules};
use crate::agents::researcher::{draft_plan, propose_strategy, ResearchRequest, Researcher};
use crate::aidp::OperatorRegistry;
use crate::diagnostics::{
    attribute_failures, build_eval_report, compare_experiments, extract_bad_cases, EvalReport, Histogram,
};
use crate::memory::{best_config, memory_context};
use crate::metrics::{emit_trajectory_data, normalize_for, trajectory_rows, GainReport};
use crate::model::{NodeId, NodeStatus, StrategyKind, TaskDefinition, TrainingConfig};
use crate::runtime::state::{FileStore, MemoryStore, RunState, StateStore};
use crate::runtime::{BuildContext, Components, RunConfig, RuntimeError};
use crate::search::{
    backpropagate, expand, expand_unplanned, mark_running, plant_root, plant_unplanned_root, Completion,
    SelectionPolicy, UctParams, DEFAULT_EXPLORATION,
};
use crate::sim::researcher::BASE_DATASET;
use crate::util::atomic_write;

/// Directories created under the workspace.
pub const WORKSPACE_DIRS: [&str; 10] = [
    "datasets",
    "transcripts",
    "reports",
    "plans",
    "contexts",
    "jobs/pending",
    "jobs/running",
    "jobs/done",
    "state",
    "plots",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BestNode {
    pub node_id: NodeId,
    pub score: f64,
    pub reward: f64,
    pub strategy: Option<StrategyKind>,
    pub path: Vec<NodeId>,
    pub config: Option<TrainingConfig>,
}

/// What a finished run reports back.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub state: RunState,
    pub iterations: usize,
    pub best: Option<BestNode>,
    /// Best-so-far score after each completed iteration.
    pub frontier: Vec<Option<f64>>,
    pub gain: Option<GainReport>,
}

pub struct Engine {
    pub config: RunConfig,
    pub task: TaskDefinition,
    workspace: PathBuf,
    policy: Box<dyn SelectionPolicy>,
    researcher: Arc<dyn Researcher>,
    executor: Arc<dyn Executor>,
    labeler: Arc<dyn ChatBackend>,
    operators: Arc<OperatorRegistry>,
    store: Box<dyn StateStore>,
    write_files: bool,
    stop_after: Option<u64>,
    stop_after_iterations: Option<usize>,
}

impl Engine {
    /// Loads the task named by `config` and builds every component from the
    /// built-in registries.
    pub fn new(config: RunConfig) -> Result<Self, RuntimeError> {
        let task = TaskDefinition::load(&config.task)?;
        Self::with_components(config, task, &Components::with_builtins())
    }

    pub fn with_components(config: RunConfig, task: TaskDefinition, components: &Components) -> Result<Self, RuntimeError> {
        config.validate()?;
        let workspace = config.workspace.clone();
        let params = UctParams::new(config.exploration.unwrap_or(DEFAULT_EXPLORATION))?;
        let policy = components.policies.create(&config.policy, &params)?;
        let ctx = BuildContext { config: &config, task: &task, operators: components.operators.clone(), workspace: &workspace };
        let researcher = components.researcher(&config.researcher, &ctx)?;
        let executor = components.executor(&config.executor, &ctx)?;
        let labeler = components.labeler(&config.diagnostics.labeler, &ctx)?;
        Ok(Self {
            store: Box::new(FileStore::new(&workspace)),
            operators: components.operators.clone(),
            config,
            task,
            workspace,
            policy,
            researcher,
            executor,
            labeler,
            write_files: true,
            stop_after: None,
            stop_after_iterations: None,
        })
    }

    /// Keeps state in memory and writes nothing to disk.
    pub fn in_memory(mut self) -> Self {
        self.store = Box::new(MemoryStore::default());
        self.write_files = false;
        self
    }

    pub fn with_store(mut self, store: Box<dyn StateStore>) -> Self {
        self.store = store;
        self
    }

    /// Stops with [`RuntimeError::Interrupted`] right after the given number
    /// of persisted transitions, as if the process had been killed.
    pub fn stop_after(mut self, transitions: u64) -> Self {
        self.stop_after = Some(transitions);
        self
    }

    /// Stops with [`RuntimeError::Interrupted`] once the given number of
    /// iterations has completed and been persisted.
    pub fn stop_after_iterations(mut self, iterations: usize) -> Self {
        self.stop_after_iterations = Some(iterations);
        self
    }

    pub fn workspace(&self) -> &Path {
        &self.workspace
    }

    fn init_workspace(&self) -> Result<(), RuntimeError> {
        for d in WORKSPACE_DIRS {
            let p = self.workspace.join(d);
            std::fs::create_dir_all(&p).map_err(|e| RuntimeError::io(&p, e))?;
        }
        if let Some(src) = &self.task.initial_train_data {
            let dst = self.workspace.join(BASE_DATASET);
            if !dst.exists() {
                std::fs::copy(src, &dst).map_err(|e| RuntimeError::io(src, e))?;
            }
        }
        Ok(())
    }

    fn check_matches(&self, s: RunState) -> Result<RunState, RuntimeError> {
        if s.task_id != self.task.task_id || s.master_seed != self.config.seed || s.policy != self.config.policy {
            return Err(RuntimeError::Config(format!(
                "workspace holds a run of task `{}` with seed {} and policy {}; refusing to mix it with task `{}`, seed {}, policy {}",
                s.task_id, s.master_seed, s.policy, self.task.task_id, self.config.seed, self.config.policy
            )));
        }
        Ok(s)
    }

    fn persist(&self, state: &mut RunState) -> Result<(), RuntimeError> {
        state.transitions += 1;
        self.store.save(state)?;
        if self.stop_after == Some(state.transitions) {
            return Err(RuntimeError::Interrupted { transitions: state.transitions });
        }
        Ok(())
    }

    fn write(&self, rel: &str, body: &str) -> Result<(), RuntimeError> {
        if !self.write_files {
            return Ok(());
        }
        let p = self.workspace.join(rel);
        atomic_write(&p, body.as_bytes()).map_err(|e| RuntimeError::io(&p, e))
    }

    /// Starts a new run. Fails if the workspace already holds one.
    pub fn run(&mut self) -> Result<RunSummary, RuntimeError> {
        if self.store.load()?.is_some() {
            return Err(RuntimeError::Config(format!(
                "{} already holds a run; use resume to continue it",
                self.store.location().display()
            )));
        }
        if self.write_files {
            self.init_workspace()?;
        }
        let state = RunState::new(&self.task.task_id, self.config.seed, &self.config.policy);
        self.drive(state)
    }

    /// Continues a persisted run. Resuming a finished run only rewrites its
    /// outputs.
    pub fn resume(&mut self) -> Result<RunSummary, RuntimeError> {
        let state = self.store.load()?.ok_or_else(|| RuntimeError::CorruptState {
            path: self.store.location(),
            detail: "no persisted run state to resume".into(),
        })?;
        let state = self.check_matches(state)?;
        if self.write_files {
            self.init_workspace()?;
        }
        self.drive(state)
    }

    /// Runs until the iteration or wall-clock budget is spent.
    fn drive(&mut self, mut state: RunState) -> Result<RunSummary, RuntimeError> {
        let started = Instant::now();
        let budget = self.config.iteration_budget(self.task.constraints.max_iterations);
        let deadline = self.config.budgets.wall_clock_secs.map(Duration::from_secs);
        loop {
            let in_flight = state.tree.nodes().find(|n| !n.status.is_complete()).map(|n| n.id);
            if let Some(id) = in_flight {
                self.execute(&mut state, id)?;
                continue;
            }
            if state.tree.iteration_count() >= budget {
                break;
            }
            if deadline.is_some_and(|d| started.elapsed() >= d) {
                log::info!("wall-clock budget spent after {} iterations", state.tree.iteration_count());
                break;
            }
            self.plan_next(&mut state)?;
        }
        if !state.finished {
            state.finished = true;
            self.persist(&mut state)?;
        }
        let summary = summarize(state, &self.task);
        if self.write_files {
            self.write_outputs(&summary)?;
        }
        Ok(summary)
    }

    /// Dataset paths plans may train on without producing them.
    fn known_datasets(&self, state: &RunState) -> BTreeSet<String> {
        let mut known = BTreeSet::new();
        if self.task.initial_train_data.is_some() {
            known.insert(BASE_DATASET.to_string());
        }
        if self.write_files {
            if let Ok(rd) = std::fs::read_dir(self.workspace.join("datasets")) {
                for e in rd.flatten() {
                    if let Some(name) = e.file_name().to_str().filter(|n| n.ends_with(".jsonl")) {
                        known.insert(format!("datasets/{name}"));
                    }
                }
            }
        }
        for n in state.tree.nodes() {
            if let Some(p) = &n.plan {
                known.extend(p.data_spec.output_paths());
            }
        }
        known
    }

    fn plan_next(&self, state: &mut RunState) -> Result<(), RuntimeError> {
        let tree = &state.tree;
        let new_node = NodeId(tree.next_id().0.max(1));
        let parent = if tree.is_empty() { None } else { Some(self.policy.select(tree)?) };
        let context = match parent {
            Some(p) => memory_context(tree, p, &self.config.memory.thresholds(), self.config.memory.budget_chars)?.render(),
            None => String::new(),
        };
        self.write(&format!("contexts/{}.txt", new_node.0), &context)?;
        let known = self.known_datasets(state);
        let req = ResearchRequest {
            task: &self.task,
            tree,
            parent,
            new_node,
            context: &context,
            rules: PlanRules { task: &self.task, at_root: parent.is_none(), registry: &self.operators, known_datasets: &known },
            master_seed: self.config.seed,
        };
        let outcome = propose_strategy(&*self.researcher, &req).and_then(|c| draft_plan(&*self.researcher, &c, &req));
        let id = match (parent, outcome) {
            (None, Ok((_, plan))) => plant_root(&mut state.tree, plan)?,
            (Some(p), Ok((_, plan))) => expand(&mut state.tree, p, plan)?,
            (None, Err(e)) => {
                log::warn!("root planning failed: {e}");
                plant_unplanned_root(&mut state.tree, e.to_string())?
            }
            (Some(p), Err(e)) => {
                log::warn!("planning under {p} failed: {e}");
                expand_unplanned(&mut state.tree, p, e.to_string())?
            }
        };
        debug_assert_eq!(id, new_node);
        if let Some(plan) = state.tree.get(id).and_then(|n| n.plan.as_ref()) {
            self.write(&format!("plans/{}.md", id.0), &render_plan(plan).text)?;
        }
        self.persist(state)
    }

    fn execute(&self, state: &mut RunState, id: NodeId) -> Result<(), RuntimeError> {
        let node = state.tree.get(id).ok_or(crate::search::SearchError::UnknownNode(id))?;
        let Some(plan) = node.plan.clone() else {
            backpropagate(&mut state.tree, id, Completion::Failed)?;
            self.persist(state)?;
            return self.check_iteration_stop(state);
        };
        if node.status == NodeStatus::Pending {
            mark_running(&mut state.tree, id)?;
            self.persist(state)?;
        }
        let workers = self.config.budgets.concurrent_jobs.min(self.task.constraints.max_parallel_configs).max(1);
        let completion = match delegate_plan(&plan, &*self.executor, id, workers) {
            Err(e @ ExecError::PipelineFailed { .. }) => {
                state.tree.get_mut(id).expect("exists").error = Some(e.to_string());
                Completion::Failed
            }
            Err(e) => return Err(e.into()),
            Ok(d) => {
                self.executor.finish_node(id, &d.result)?;
                let mut result = d.result;
                let report = self.diagnose(state, id, &result, &d.eval_outputs)?;
                if self.write_files {
                    result.eval_report = Some(format!("reports/{}.json", id.0));
                }
                let node = state.tree.get_mut(id).expect("exists");
                node.diagnosis = Some(report.digest());
                let best = result.best_raw_score;
                node.result = Some(result);
                state.reports.insert(id.0, report);
                match best {
                    None => Completion::Failed,
                    Some(s) => match normalize_for(s, &self.task.primary_metric) {
                        Ok(r) => Completion::Done(r),
                        Err(e) => {
                            state.tree.get_mut(id).expect("exists").error = Some(e.to_string());
                            Completion::Failed
                        }
                    },
                }
            }
        };
        backpropagate(&mut state.tree, id, completion)?;
        self.persist(state)?;
        self.check_iteration_stop(state)
    }

    fn check_iteration_stop(&self, state: &RunState) -> Result<(), RuntimeError> {
        if self.stop_after_iterations == Some(state.tree.iteration_count()) {
            return Err(RuntimeError::Interrupted { transitions: state.transitions });
        }
        Ok(())
    }

    fn diagnose(
        &self,
        state: &RunState,
        id: NodeId,
        result: &crate::model::ExperimentResult,
        outputs: &[crate::diagnostics::EvalOutput],
    ) -> Result<EvalReport, RuntimeError> {
        let enabled = self.config.bad_case_analysis;
        let (cases, histogram) = if enabled {
            let cases = extract_bad_cases(outputs, &self.task, self.config.diagnostics.analysis_limit);
            if cases.is_empty() {
                (cases, Histogram::new())
            } else {
                match attribute_failures(&cases, &*self.labeler) {
                    Ok(labeled) => labeled,
                    Err(e) => {
                        log::warn!("failure attribution for {id} failed: {e}");
                        let n = cases.len();
                        let cases = cases.into_iter().map(|c| crate::diagnostics::BadCase { label: Some("unattributed".into()), ..c }).collect();
                        (cases, Histogram::from([("unattributed".to_string(), n)]))
                    }
                }
            }
        } else {
            (Vec::new(), Histogram::new())
        };
        let draft = EvalReport::draft(id, &self.task, result, cases, histogram, enabled);
        let parent = state.tree.get(id).and_then(|n| n.parent).and_then(|p| state.reports.get(&p.0));
        let history: Vec<EvalReport> = state.reports.values().filter(|r| r.node_id != id).cloned().collect();
        let comparison = compare_experiments(&draft, parent, &history);
        let ws = self.write_files.then_some(self.workspace.as_path());
        Ok(build_eval_report(draft, comparison, ws)?)
    }

    fn write_outputs(&self, summary: &RunSummary) -> Result<(), RuntimeError> {
        self.write("plots/trajectory.csv", &emit_trajectory_data(&summary.state.tree))?;
        let best = serde_json::to_string_pretty(&summary.best).expect("serializes") + "\n";
        self.write("best_node.json", &best)?;
        self.write("final_report.txt", &final_report(summary, &self.task, &self.config))?;
        self.write("plots/tree.txt", &crate::runtime::render::render_tree(&summary.state.tree, &UctParams::default()))?;
        self.write("plots/trajectory.svg", &crate::runtime::render::render_svg(&summary.state.tree, &self.task.task_id))?;
        Ok(())
    }
}

/// The best Done node by raw score, lowest id on ties.
pub fn best_node(state: &RunState) -> Option<BestNode> {
    let mut best: Option<(&crate::model::ExperimentNode, f64)> = None;
    for n in state.tree.nodes().filter(|n| n.status == NodeStatus::Done) {
        if let Some(s) = n.best_raw_score() {
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((n, s));
            }
        }
    }
    best.map(|(n, score)| BestNode {
        node_id: n.id,
        score,
        reward: n.reward.unwrap_or(0.0),
        strategy: n.strategy(),
        path: state.tree.path_from_root(n.id).unwrap_or_default(),
        config: best_config(n).cloned(),
    })
}

pub fn summarize(state: RunState, task: &TaskDefinition) -> RunSummary {
    let rows = trajectory_rows(&state.tree);
    let best = best_node(&state);
    let gain = match (best.as_ref(), task.base_score, task.ref_score) {
        (Some(b), Some(base), Some(reference)) => GainReport::new(b.score, base, reference).ok(),
        _ => None,
    };
    RunSummary {
        iterations: rows.len(),
        frontier: rows.iter().map(|r| r.frontier).collect(),
        best,
        gain,
        state,
    }
}

pub fn final_report(summary: &RunSummary, task: &TaskDefinition, config: &RunConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "task\t{}", task.task_id);
    let _ = writeln!(out, "policy\t{}", config.policy);
    let _ = writeln!(out, "seed\t{}", config.seed);
    let _ = writeln!(out, "iterations\t{}", summary.iterations);
    match &summary.best {
        Some(b) => {
            let _ = writeln!(out, "best_node\t{}", b.node_id.0);
            let _ = writeln!(out, "best_{}\t{:.6}", task.primary_metric.name, b.score);
            let path: Vec<String> = b.path.iter().map(|n| n.0.to_string()).collect();
            let _ = writeln!(out, "best_path\t{}", path.join(" > "));
        }
        None => {
            let _ = writeln!(out, "best_node\tnone");
        }
    }
    if let Some(g) = &summary.gain {
        let _ = writeln!(out, "relative_gain\t{}", g.percent());
    }
    let _ = writeln!(out, "\nnode\tparent\tstatus\tstrategy\tscore\tN\tQ");
    for n in summary.state.tree.nodes() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}",
            n.id.0,
            n.parent.map_or("-".into(), |p| p.0.to_string()),
            n.status,
            n.strategy().map_or("none", StrategyKind::slug),
            n.best_raw_score().map_or("-".into(), |s| format!("{s:.6}")),
            n.visits,
            n.total_reward
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::plan::tests::task;

    fn engine(seed: u64, iterations: usize) -> Engine {
        let mut config = RunConfig::simulated("unused", "unused", seed);
        config.budgets.iterations = Some(iterations);
        let mut t = task();
        t.initial_train_data = Some("base.jsonl".into());
        Engine::with_components(config, t, &Components::with_builtins()).unwrap().in_memory()
    }

    #[test]
    fn runs_to_budget_in_memory() {
        let s = engine(1, 8).run().unwrap();
        assert_eq!(s.iterations, 8);
        assert_eq!(s.state.tree.root(), Some(NodeId(1)));
        s.state.tree.check_consistency().unwrap();
        let f: Vec<f64> = s.frontier.iter().map(|v| v.unwrap()).collect();
        assert!(f.windows(2).all(|w| w[0] <= w[1]), "{f:?}");
        let root = s.state.tree.get(NodeId(1)).unwrap();
        assert_eq!(root.visits, 8);
        assert_eq!(root.strategy(), Some(StrategyKind::EstablishBaseline));
    }

    #[test]
    fn same_seed_same_tree() {
        let a = engine(4, 6).run().unwrap();
        let b = engine(4, 6).run().unwrap();
        assert_eq!(a.state.tree, b.state.tree);
    }

    #[test]
    fn interrupt_then_resume_in_memory() {
        let full = engine(2, 6).run().unwrap();
        let store = Arc::new(MemoryStore::default());
        struct Shared(Arc<MemoryStore>);
        impl StateStore for Shared {
            fn save(&self, s: &RunState) -> Result<(), RuntimeError> {
                self.0.save(s)
            }
            fn load(&self) -> Result<Option<RunState>, RuntimeError> {
                self.0.load()
            }
        }
        let err = engine(2, 6).with_store(Box::new(Shared(store.clone()))).stop_after(5).run().unwrap_err();
        assert!(matches!(err, RuntimeError::Interrupted { transitions: 5 }));
        let resumed = engine(2, 6).with_store(Box::new(Shared(store.clone()))).resume().unwrap();
        assert_eq!(resumed.state.tree, full.state.tree);
        assert_eq!(resumed.state.reports, full.state.reports);
        let again = engine(2, 6).with_store(Box::new(Shared(store.clone()))).run().unwrap_err();
        assert_eq!(again.kind(), "config");
    }

    #[test]
    fn resume_without_state_is_corrupt() {
        assert_eq!(engine(1, 3).resume().unwrap_err().kind(), "corrupt_state");
    }
}
