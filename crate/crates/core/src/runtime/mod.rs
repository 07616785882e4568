//! Running the outer loop: configuration, component lookup, persistence,
//! the job protocol and rendering.

pub mod config;
pub mod engine;
pub mod jobs;
pub mod render;
pub mod state;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::agents::chat::{ChatBackend, ChatClient, HttpChatBackend};
use crate::agents::executor::{ExecError, Executor};
use crate::agents::researcher::{LlmResearcher, Researcher};
use crate::aidp::{OpEnv, OperatorRegistry};
use crate::diagnostics::{DiagError, KeywordLabeler};
use crate::memory::MemoryError;
use crate::metrics::MetricsError;
use crate::model::TaskError;
use crate::search::{PolicyRegistry, SearchError};
use crate::sim::landscape::LandscapeError;
use crate::sim::{Landscape, ScriptedResearcher, SimulatedExecutor};

pub use config::RunConfig;
pub use engine::{Engine, RunSummary};
pub use jobs::{BridgeExecutor, FakeBridge, JobClient, JobError, JobSpec, JobStatus};
pub use state::{FileStore, MemoryStore, RunState, StateStore};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("corrupt state in {}: {detail}", path.display())]
    CorruptState { path: PathBuf, detail: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Diagnostics(#[from] DiagError),
    #[error(transparent)]
    Executor(#[from] ExecError),
    #[error(transparent)]
    Job(#[from] JobError),
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("interrupted after {transitions} persisted transitions")]
    Interrupted { transitions: u64 },
    #[error("no {kind} named `{name}` (known: {known})")]
    UnknownComponent { kind: &'static str, name: String, known: String },
}

impl RuntimeError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        RuntimeError::Io { path: path.to_path_buf(), source }
    }

    /// Stable slug for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            RuntimeError::Config(_) => "config",
            RuntimeError::Task(_) => "task",
            RuntimeError::CorruptState { .. } => "corrupt_state",
            RuntimeError::Io { .. } => "io",
            RuntimeError::Search(_) => "search",
            RuntimeError::Memory(_) => "memory",
            RuntimeError::Diagnostics(_) => "diagnostics",
            RuntimeError::Executor(ExecError::ExecutorUnavailable(_)) => "executor_unavailable",
            RuntimeError::Executor(_) => "executor",
            RuntimeError::Job(JobError::Timeout { .. }) => "job_timeout",
            RuntimeError::Job(JobError::BridgeUnavailable(_)) => "bridge_unavailable",
            RuntimeError::Job(JobError::CorruptState { .. }) => "corrupt_state",
            RuntimeError::Job(_) => "job",
            RuntimeError::Landscape(_) => "landscape",
            RuntimeError::Metrics(_) => "metrics",
            RuntimeError::Interrupted { .. } => "interrupted",
            RuntimeError::UnknownComponent { .. } => "unknown_component",
        }
    }
}

/// What a component factory may look at.
pub struct BuildContext<'a> {
    pub config: &'a RunConfig,
    pub task: &'a crate::model::TaskDefinition,
    pub operators: Arc<OperatorRegistry>,
    pub workspace: &'a Path,
}

pub type ResearcherFactory = Box<dyn Fn(&BuildContext<'_>) -> Result<Arc<dyn Researcher>, RuntimeError> + Send + Sync>;
pub type ExecutorFactory = Box<dyn Fn(&BuildContext<'_>) -> Result<Arc<dyn Executor>, RuntimeError> + Send + Sync>;
pub type LabelerFactory = Box<dyn Fn(&BuildContext<'_>) -> Result<Arc<dyn ChatBackend>, RuntimeError> + Send + Sync>;

/// Name-indexed registries for every pluggable piece of a run.
pub struct Components {
    pub policies: PolicyRegistry,
    pub operators: Arc<OperatorRegistry>,
    researchers: BTreeMap<String, ResearcherFactory>,
    executors: BTreeMap<String, ExecutorFactory>,
    labelers: BTreeMap<String, LabelerFactory>,
}

impl Default for Components {
    fn default() -> Self {
        Self::with_builtins()
    }
}

fn chat_backend(ctx: &BuildContext<'_>, which: &str) -> Result<Arc<dyn ChatBackend>, RuntimeError> {
    let cfg = match which {
        "researcher" => ctx.config.researcher_backend.as_ref(),
        _ => ctx.config.judge_backend.as_ref(),
    }
    .ok_or_else(|| RuntimeError::Config(format!("{which}_backend is required")))?;
    let http = HttpChatBackend::new(cfg.clone()).map_err(|e| RuntimeError::Config(e.to_string()))?;
    let client = ChatClient::new(Arc::new(http), cfg.retry)
        .with_transcript(ctx.workspace.join("transcripts").join(format!("{which}.jsonl")));
    Ok(Arc::new(client))
}

impl Components {
    pub fn empty() -> Self {
        Self {
            policies: PolicyRegistry::empty(),
            operators: Arc::new(OperatorRegistry::empty()),
            researchers: BTreeMap::new(),
            executors: BTreeMap::new(),
            labelers: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut c = Self {
            policies: PolicyRegistry::with_builtins(),
            operators: Arc::new(OperatorRegistry::with_builtins()),
            ..Self::empty()
        };
        c.register_researcher("scripted", |_| Ok(Arc::new(ScriptedResearcher::default())));
        c.register_researcher("llm", |ctx| Ok(Arc::new(LlmResearcher::new(chat_backend(ctx, "researcher")?))));
        c.register_executor("simulated", |ctx| {
            let landscape = match &ctx.config.landscape {
                Some(p) => Landscape::load(p)?,
                None => Landscape::deceptive(),
            };
            let mut e = SimulatedExecutor::new(Arc::new(landscape), ctx.config.seed, ctx.task.constraints.max_train_samples);
            e.registry = ctx.operators.clone();
            Ok(Arc::new(e))
        });
        c.register_executor("bridge", |ctx| {
            let b = &ctx.config.bridge;
            let client = JobClient::new(
                ctx.workspace,
                Duration::from_millis(b.poll_interval_ms),
                Duration::from_secs_f64(b.timeout_secs),
            );
            let mut env = OpEnv::new(ctx.workspace);
            if ctx.config.judge_backend.is_some() {
                env = env.with_chat(chat_backend(ctx, "judge")?);
            }
            Ok(Arc::new(BridgeExecutor::new(client, ctx.operators.clone(), env, ctx.task)))
        });
        c.register_labeler("keyword", |_| Ok(Arc::new(KeywordLabeler)));
        c.register_labeler("llm", |ctx| chat_backend(ctx, "judge"));
        c
    }

    pub fn register_researcher<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&BuildContext<'_>) -> Result<Arc<dyn Researcher>, RuntimeError> + Send + Sync + 'static,
    {
        self.researchers.insert(name.to_ascii_lowercase(), Box::new(f));
    }

    pub fn register_executor<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&BuildContext<'_>) -> Result<Arc<dyn Executor>, RuntimeError> + Send + Sync + 'static,
    {
        self.executors.insert(name.to_ascii_lowercase(), Box::new(f));
    }

    pub fn register_labeler<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&BuildContext<'_>) -> Result<Arc<dyn ChatBackend>, RuntimeError> + Send + Sync + 'static,
    {
        self.labelers.insert(name.to_ascii_lowercase(), Box::new(f));
    }

    fn lookup<'m, T>(map: &'m BTreeMap<String, T>, kind: &'static str, name: &str) -> Result<&'m T, RuntimeError> {
        map.get(&name.to_ascii_lowercase()).ok_or_else(|| RuntimeError::UnknownComponent {
            kind,
            name: name.to_string(),
            known: map.keys().cloned().collect::<Vec<_>>().join(", "),
        })
    }

    pub fn researcher(&self, name: &str, ctx: &BuildContext<'_>) -> Result<Arc<dyn Researcher>, RuntimeError> {
        Self::lookup(&self.researchers, "researcher", name)?(ctx)
    }

    pub fn executor(&self, name: &str, ctx: &BuildContext<'_>) -> Result<Arc<dyn Executor>, RuntimeError> {
        Self::lookup(&self.executors, "executor", name)?(ctx)
    }

    pub fn labeler(&self, name: &str, ctx: &BuildContext<'_>) -> Result<Arc<dyn ChatBackend>, RuntimeError> {
        Self::lookup(&self.labelers, "labeler", name)?(ctx)
    }
}
