//! File-based job protocol between the orchestrator and a training bridge.
//!
//! ```text
//! <workspace>/jobs/pending/<job_id>.json        JobSpec written by the client
//! <workspace>/jobs/running/<job_id>.json        moved there by the bridge
//! <workspace>/jobs/done/<job_id>.json           the spec once finished
//! <workspace>/jobs/done/<job_id>.status.json    terminal JobStatus
//! <workspace>/jobs/heartbeat                    touched by a live bridge
//! ```
//!
//! Every write goes through a temp file and an atomic rename. Payload paths
//! are workspace-relative. Job kinds and their payloads:
//!
//! * `export_dataset`: `{source_id, split?, output}`; result is `output`, a
//!   chat-record JSONL file.
//! * `finetune`: `{config, dataset_path, base_model, output_dir}`; result is
//!   the model directory.
//! * `evaluate`: `{model_path, eval_entry, metric, metrics_output,
//!   outputs_path}`; result is a JSON object of metric name to value, and
//!   `outputs_path` optionally holds per-example outputs as JSONL.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agents::executor::{ConfigRun, ExecError, Executor};
use crate::aidp::{run_pipeline, OpEnv, OperatorRegistry, RemoteError, RemoteSource};
use crate::diagnostics::{parse_eval_outputs, EvalOutput};
use crate::model::{ConfigOutcome, ExperimentPlan, ExperimentResult, NodeId, TrainingConfig};
use crate::util::atomic_write;

pub const JOB_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum JobError {
    #[error("job {job_id} timed out after {waited_secs:.1}s")]
    Timeout { job_id: String, waited_secs: f64 },
    #[error("bridge unavailable: {0}")]
    BridgeUnavailable(String),
    #[error("corrupt state for job {job_id}: {detail}")]
    CorruptState { job_id: String, detail: String },
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> JobError + '_ {
    move |source| JobError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    ExportDataset,
    Finetune,
    Evaluate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub schema_version: u32,
    pub job_id: String,
    pub kind: JobKind,
    pub payload: Value,
}

impl JobSpec {
    pub fn new(job_id: impl Into<String>, kind: JobKind, payload: Value) -> Self {
        Self { schema_version: JOB_SCHEMA_VERSION, job_id: job_id.into(), kind, payload }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub schema_version: u32,
    pub job_id: String,
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Machine-readable failure class, e.g. `unknown_source`, `split_required`,
    /// `policy`, `timeout`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<String>,
}

impl JobStatus {
    pub fn succeeded(job_id: &str, result_path: impl Into<String>) -> Self {
        Self {
            schema_version: JOB_SCHEMA_VERSION,
            job_id: job_id.into(),
            state: JobState::Succeeded,
            result_path: Some(result_path.into()),
            error: None,
            error_kind: None,
        }
    }

    pub fn failed(job_id: &str, kind: &str, error: impl Into<String>) -> Self {
        Self {
            schema_version: JOB_SCHEMA_VERSION,
            job_id: job_id.into(),
            state: JobState::Failed,
            result_path: None,
            error: Some(error.into()),
            error_kind: Some(kind.into()),
        }
    }

    fn in_flight(job_id: &str, state: JobState) -> Self {
        Self { schema_version: JOB_SCHEMA_VERSION, job_id: job_id.into(), state, result_path: None, error: None, error_kind: None }
    }
}

/// Workspace-relative job directories.
#[derive(Clone, Debug)]
pub struct JobDirs {
    pub root: PathBuf,
}

impl JobDirs {
    pub fn new(workspace: &Path) -> Self {
        Self { root: workspace.join("jobs") }
    }
    pub fn pending(&self, id: &str) -> PathBuf {
        self.root.join("pending").join(format!("{id}.json"))
    }
    pub fn running(&self, id: &str) -> PathBuf {
        self.root.join("running").join(format!("{id}.json"))
    }
    pub fn done(&self, id: &str) -> PathBuf {
        self.root.join("done").join(format!("{id}.json"))
    }
    pub fn status(&self, id: &str) -> PathBuf {
        self.root.join("done").join(format!("{id}.status.json"))
    }
    pub fn heartbeat(&self) -> PathBuf {
        self.root.join("heartbeat")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), JobError> {
    let mut text = serde_json::to_string_pretty(value).expect("job documents serialize");
    text.push('\n');
    atomic_write(path, text.as_bytes()).map_err(io_err(path))
}

pub fn parse_status(text: &str, job_id: &str) -> Result<JobStatus, JobError> {
    let corrupt = |detail: String| JobError::CorruptState { job_id: job_id.into(), detail };
    let status: JobStatus = serde_json::from_str(text).map_err(|e| corrupt(format!("malformed status file: {e}")))?;
    if status.schema_version != JOB_SCHEMA_VERSION {
        return Err(corrupt(format!("status schema version {}, expected {JOB_SCHEMA_VERSION}", status.schema_version)));
    }
    if status.job_id != job_id {
        return Err(corrupt(format!("status file names job {}", status.job_id)));
    }
    Ok(status)
}

pub fn parse_spec(text: &str) -> Result<JobSpec, String> {
    let spec: JobSpec = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if spec.schema_version != JOB_SCHEMA_VERSION {
        return Err(format!("spec schema version {}, expected {JOB_SCHEMA_VERSION}", spec.schema_version));
    }
    Ok(spec)
}

/// The orchestrator's side of the protocol.
#[derive(Clone, Debug)]
pub struct JobClient {
    pub workspace: PathBuf,
    pub dirs: JobDirs,
    pub poll_interval: Duration,
    pub timeout: Duration,
    /// When set, submission fails unless the heartbeat is younger than this.
    pub require_heartbeat: Option<Duration>,
}

impl JobClient {
    pub fn new(workspace: impl Into<PathBuf>, poll_interval: Duration, timeout: Duration) -> Self {
        let workspace = workspace.into();
        Self { dirs: JobDirs::new(&workspace), workspace, poll_interval, timeout, require_heartbeat: None }
    }

    fn check_bridge(&self) -> Result<(), JobError> {
        let Some(max_age) = self.require_heartbeat else { return Ok(()) };
        let path = self.dirs.heartbeat();
        let age = std::fs::metadata(&path)
            .and_then(|m| m.modified())
            .map_err(|_| JobError::BridgeUnavailable(format!("no heartbeat at {}", path.display())))?
            .elapsed()
            .unwrap_or_default();
        if age > max_age {
            return Err(JobError::BridgeUnavailable(format!("heartbeat is {:.0}s old", age.as_secs_f64())));
        }
        Ok(())
    }

    pub fn submit_job(&self, spec: &JobSpec) -> Result<String, JobError> {
        self.check_bridge()?;
        for sub in ["pending", "running", "done"] {
            let dir = self.dirs.root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| JobError::BridgeUnavailable(format!("{}: {e}", dir.display())))?;
        }
        write_json(&self.dirs.pending(&spec.job_id), spec)?;
        Ok(spec.job_id.clone())
    }

    pub fn poll_job(&self, job_id: &str) -> Result<JobStatus, JobError> {
        let status = self.dirs.status(job_id);
        if status.exists() {
            let text = std::fs::read_to_string(&status).map_err(io_err(&status))?;
            let s = parse_status(&text, job_id)?;
            if s.state == JobState::Succeeded {
                let ok = s.result_path.as_deref().is_some_and(|p| self.workspace.join(p).exists());
                if !ok {
                    return Err(JobError::CorruptState {
                        job_id: job_id.into(),
                        detail: format!("succeeded without an existing result path ({:?})", s.result_path),
                    });
                }
            }
            return Ok(s);
        }
        if self.dirs.running(job_id).exists() {
            return Ok(JobStatus::in_flight(job_id, JobState::Running));
        }
        if self.dirs.pending(job_id).exists() {
            return Ok(JobStatus::in_flight(job_id, JobState::Queued));
        }
        Err(JobError::UnknownJob(job_id.into()))
    }

    /// Polls until the job is terminal. On timeout the job is withdrawn and
    /// recorded as failed with `error_kind = "timeout"`.
    pub fn wait(&self, job_id: &str) -> Result<JobStatus, JobError> {
        let start = Instant::now();
        loop {
            let s = self.poll_job(job_id)?;
            if s.state.is_terminal() {
                return Ok(s);
            }
            if start.elapsed() >= self.timeout {
                let _ = std::fs::remove_file(self.dirs.pending(job_id));
                write_json(&self.dirs.status(job_id), &JobStatus::failed(job_id, "timeout", "no terminal status before the deadline"))?;
                return Err(JobError::Timeout { job_id: job_id.into(), waited_secs: start.elapsed().as_secs_f64() });
            }
            std::thread::sleep(self.poll_interval);
        }
    }

    /// Reuses a finished job with the same id (for resumed runs), otherwise
    /// submits `spec` and waits.
    pub fn run(&self, spec: &JobSpec) -> Result<JobStatus, JobError> {
        match self.poll_job(&spec.job_id) {
            Ok(s) if s.state.is_terminal() => return Ok(s),
            Ok(_) => {}
            Err(JobError::UnknownJob(_)) => {
                self.submit_job(spec)?;
            }
            Err(e) => return Err(e),
        }
        self.wait(&spec.job_id)
    }
}

/// What a bridge does with one job: `Ok(result_path)` or `Err((kind, message))`.
pub type JobHandler = dyn Fn(&JobSpec, &Path) -> Result<String, (String, String)> + Send + Sync;

/// In-process stand-in for the training bridge.
pub struct FakeBridge {
    pub workspace: PathBuf,
    dirs: JobDirs,
    handler: Arc<JobHandler>,
}

impl FakeBridge {
    /// A bridge whose handler fabricates plausible results (see
    /// [`default_fake_handler`]).
    pub fn new(workspace: impl Into<PathBuf>) -> Self {
        Self::with_handler(workspace, Arc::new(default_fake_handler))
    }

    pub fn with_handler(workspace: impl Into<PathBuf>, handler: Arc<JobHandler>) -> Self {
        let workspace = workspace.into();
        Self { dirs: JobDirs::new(&workspace), workspace, handler }
    }

    pub fn touch_heartbeat(&self) -> Result<(), JobError> {
        let path = self.dirs.heartbeat();
        atomic_write(&path, format!("{:?}\n", SystemTime::now()).as_bytes()).map_err(io_err(&path))
    }

    /// Runs every pending job, in job id order. Returns the number processed.
    pub fn process_pending(&self) -> Result<usize, JobError> {
        let dir = self.dirs.root.join("pending");
        let mut ids: Vec<String> = match std::fs::read_dir(&dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(str::to_string))
                .collect(),
            Err(_) => return Ok(0),
        };
        ids.sort();
        for id in &ids {
            let running = self.dirs.running(id);
            std::fs::create_dir_all(running.parent().expect("has parent")).map_err(io_err(&running))?;
            if std::fs::rename(self.dirs.pending(id), &running).is_err() {
                continue;
            }
            let status = match std::fs::read_to_string(&running).map_err(|e| e.to_string()).and_then(|t| parse_spec(&t)) {
                Err(e) => JobStatus::failed(id, "parse", e),
                Ok(spec) => match (self.handler)(&spec, &self.workspace) {
                    Ok(result) => JobStatus::succeeded(id, result),
                    Err((kind, msg)) => JobStatus::failed(id, &kind, msg),
                },
            };
            write_json(&self.dirs.status(id), &status)?;
            let done = self.dirs.done(id);
            std::fs::rename(&running, &done).map_err(io_err(&done))?;
        }
        Ok(ids.len())
    }

    /// Serves jobs on a background thread until the handle is stopped.
    pub fn spawn(self, interval: Duration) -> BridgeHandle {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                let _ = self.touch_heartbeat();
                if let Err(e) = self.process_pending() {
                    log::warn!("fake bridge: {e}");
                }
                std::thread::sleep(interval);
            }
        });
        BridgeHandle { stop, thread: Some(thread) }
    }
}

pub struct BridgeHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl BridgeHandle {
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BridgeHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn rel_inside(rel: &str) -> bool {
    let p = Path::new(rel);
    !p.is_absolute() && p.components().all(|c| matches!(c, std::path::Component::Normal(_) | std::path::Component::CurDir))
}

/// Exports write two chat records, finetunes write a config echo, and
/// evaluations report a score derived from the learning rate so different
/// configs differ. Paths outside the workspace fail with kind `policy`.
pub fn default_fake_handler(spec: &JobSpec, workspace: &Path) -> Result<String, (String, String)> {
    let p = &spec.payload;
    let field = |k: &str| -> Result<String, (String, String)> {
        let v = p[k].as_str().ok_or_else(|| ("parse".to_string(), format!("payload needs `{k}`")))?;
        if !rel_inside(v) {
            return Err(("policy".into(), format!("`{v}` is outside the workspace")));
        }
        Ok(v.to_string())
    };
    let write = |rel: &str, body: &str| -> Result<(), (String, String)> {
        atomic_write(&workspace.join(rel), body.as_bytes()).map_err(|e| ("io".to_string(), e.to_string()))
    };
    match spec.kind {
        JobKind::ExportDataset => {
            let source = p["source_id"].as_str().unwrap_or_default();
            if source.starts_with("unknown/") {
                return Err(("unknown_source".into(), format!("no such dataset {source}")));
            }
            if p["split"].is_null() {
                return Err(("split_required".into(), format!("{source} has splits; set split explicitly")));
            }
            let out = field("output")?;
            let body = format!(
                "{}\n{}\n",
                json!({"messages": [{"role": "user", "content": format!("{source} q0")}, {"role": "assistant", "content": "a0"}]}),
                json!({"messages": [{"role": "user", "content": format!("{source} q1")}, {"role": "assistant", "content": "a1"}]})
            );
            write(&out, &body)?;
            Ok(out)
        }
        JobKind::Finetune => {
            let out = field("output_dir")?;
            let cfg: TrainingConfig = serde_json::from_value(p["config"].clone()).map_err(|e| ("parse".to_string(), e.to_string()))?;
            cfg.check().map_err(|e| ("invalid_config".to_string(), e))?;
            write(&format!("{out}/resolved_config.json"), &serde_json::to_string_pretty(&p["config"]).unwrap_or_default())?;
            Ok(out)
        }
        JobKind::Evaluate => {
            let model = field("model_path")?;
            if !workspace.join(&model).exists() {
                return Err(("missing_model".into(), format!("no model at {model}")));
            }
            let cfg_text = std::fs::read_to_string(workspace.join(&model).join("resolved_config.json")).unwrap_or_default();
            let lr = serde_json::from_str::<Value>(&cfg_text).ok().and_then(|v| v["learning_rate"].as_f64()).unwrap_or(1e-4);
            let score = (1.0 - (lr.log10() + 4.0).abs() / 3.0).clamp(0.0, 1.0);
            let metric = p["metric"].as_str().unwrap_or("score").to_string();
            let out = field("metrics_output")?;
            write(&out, &format!("{}\n", json!({ metric: score })))?;
            if let Some(o) = p["outputs_path"].as_str() {
                let line = serde_json::to_string(&EvalOutput {
                    input: "q".into(),
                    expected: "a".into(),
                    actual: "b (unparseable format)".into(),
                    score: Some(0.0),
                })
                .unwrap_or_default();
                write(o, &format!("{line}\n"))?;
            }
            Ok(out)
        }
    }
}

/// Dataset exports through the bridge.
pub struct JobRemoteSource {
    pub client: JobClient,
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

impl RemoteSource for JobRemoteSource {
    fn export(&self, source_id: &str, split: Option<&str>) -> Result<PathBuf, RemoteError> {
        let out = format!("datasets/remote/{}-{}.jsonl", slug(source_id), slug(split.unwrap_or("default")));
        let spec = JobSpec::new(
            format!("export-{}-{}", slug(source_id), slug(split.unwrap_or("default"))),
            JobKind::ExportDataset,
            json!({ "source_id": source_id, "split": split, "output": out }),
        );
        let status = self.client.run(&spec).map_err(|e| match e {
            JobError::BridgeUnavailable(m) => RemoteError::Unavailable(m),
            other => RemoteError::Unavailable(other.to_string()),
        })?;
        match status.state {
            JobState::Succeeded => Ok(self.client.workspace.join(status.result_path.unwrap_or(out))),
            _ => {
                let msg = status.error.unwrap_or_default();
                Err(match status.error_kind.as_deref() {
                    Some("unknown_source") => RemoteError::UnknownSource(source_id.into()),
                    Some("split_required") => RemoteError::SplitRequired(msg),
                    _ => RemoteError::Failed(msg),
                })
            }
        }
    }
}

/// Real execution through the job protocol: the pipeline runs locally (remote
/// loads become export jobs), each configuration becomes a finetune job
/// followed by an evaluate job.
pub struct BridgeExecutor {
    pub client: JobClient,
    pub registry: Arc<OperatorRegistry>,
    pub env: OpEnv,
    pub metric: String,
    pub eval_entry: String,
    pub max_train_samples: usize,
    best_models: Mutex<BTreeMap<u64, String>>,
}

impl BridgeExecutor {
    pub fn new(client: JobClient, registry: Arc<OperatorRegistry>, env: OpEnv, task: &crate::model::TaskDefinition) -> Self {
        let env = env.with_remote(Arc::new(JobRemoteSource { client: client.clone() }));
        Self {
            client,
            registry,
            env,
            metric: task.primary_metric.name.clone(),
            eval_entry: task.eval_protocol.clone(),
            max_train_samples: task.constraints.max_train_samples,
            best_models: Mutex::new(BTreeMap::new()),
        }
    }

    fn model_dir(node: NodeId, config_id: &str) -> String {
        format!("models/{}/{}", node.0, slug(config_id))
    }

    /// Resolves `node:<id>` to the best model directory recorded for that node.
    fn resolve_base(&self, base: &str) -> String {
        let Some(id) = base.strip_prefix("node:").and_then(|n| n.parse::<u64>().ok()) else {
            return base.to_string();
        };
        if let Some(m) = self.best_models.lock().expect("lock").get(&id) {
            return m.clone();
        }
        let pointer = self.client.workspace.join(format!("models/{id}/best.json"));
        std::fs::read_to_string(pointer)
            .ok()
            .and_then(|t| serde_json::from_str::<Value>(&t).ok())
            .and_then(|v| v["model_path"].as_str().map(str::to_string))
            .unwrap_or_else(|| base.to_string())
    }

    /// Records which model a node's best configuration produced, so later
    /// plans can start from `node:<id>`.
    pub fn record_best(&self, node: NodeId, result: &ExperimentResult) -> Result<(), JobError> {
        let Some(best) = result.best_config_id.as_deref() else { return Ok(()) };
        let model_path = Self::model_dir(node, best);
        let pointer = self.client.workspace.join(format!("models/{}/best.json", node.0));
        write_json(&pointer, &json!({ "config_id": best, "model_path": model_path }))?;
        self.best_models.lock().expect("lock").insert(node.0, model_path);
        Ok(())
    }
}

impl Executor for BridgeExecutor {
    fn name(&self) -> &str {
        "bridge"
    }

    fn prepare_data(&self, _node: NodeId, plan: &ExperimentPlan) -> Result<(), ExecError> {
        run_pipeline(&plan.data_spec, &self.registry, &self.env, self.max_train_samples)
            .map(|_| ())
            .map_err(|e| ExecError::PipelineFailed { step: e.step_index(), message: e.to_string() })
    }

    fn run_config(
        &self,
        node: NodeId,
        _index: usize,
        config: &TrainingConfig,
        _plan: &ExperimentPlan,
    ) -> Result<ConfigRun, ExecError> {
        let started = Instant::now();
        let id = format!("n{}-{}", node.0, slug(&config.config_id));
        let model_dir = Self::model_dir(node, &config.config_id);
        let eval_dir = format!("evals/{}/{}", node.0, slug(&config.config_id));
        let unavailable = |e: JobError| match e {
            JobError::BridgeUnavailable(m) => Err(ExecError::ExecutorUnavailable(m)),
            other => Ok(ConfigRun::failed(&config.config_id, other.to_string())),
        };
        let finetune = JobSpec::new(
            format!("{id}-finetune"),
            JobKind::Finetune,
            json!({
                "config": config,
                "dataset_path": config.dataset_path,
                "base_model": self.resolve_base(&config.base_model_path),
                "output_dir": model_dir,
            }),
        );
        let status = match self.client.run(&finetune) {
            Ok(s) => s,
            Err(e) => return unavailable(e),
        };
        if status.state != JobState::Succeeded {
            return Ok(ConfigRun::failed(&config.config_id, format!("finetune failed: {}", status.error.unwrap_or_default())));
        }
        let evaluate = JobSpec::new(
            format!("{id}-evaluate"),
            JobKind::Evaluate,
            json!({
                "model_path": model_dir,
                "eval_entry": self.eval_entry,
                "metric": self.metric,
                "metrics_output": format!("{eval_dir}/metrics.json"),
                "outputs_path": format!("{eval_dir}/outputs.jsonl"),
            }),
        );
        let status = match self.client.run(&evaluate) {
            Ok(s) => s,
            Err(e) => return unavailable(e),
        };
        if status.state != JobState::Succeeded {
            return Ok(ConfigRun::failed(&config.config_id, format!("evaluation failed: {}", status.error.unwrap_or_default())));
        }
        let metrics_path = self.client.workspace.join(status.result_path.unwrap_or_default());
        let metrics: BTreeMap<String, Value> = match std::fs::read_to_string(&metrics_path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
        {
            Ok(m) => m,
            Err(e) => return Ok(ConfigRun::failed(&config.config_id, format!("unreadable metrics: {e}"))),
        };
        let Some(score) = metrics.get(&self.metric).and_then(Value::as_f64) else {
            return Ok(ConfigRun::failed(&config.config_id, format!("metrics file lacks `{}`", self.metric)));
        };
        let eval_outputs = std::fs::read_to_string(self.client.workspace.join(format!("{eval_dir}/outputs.jsonl")))
            .ok()
            .and_then(|t| parse_eval_outputs(&t).ok())
            .unwrap_or_default();
        Ok(ConfigRun { outcome: ConfigOutcome::ok(&config.config_id, score), eval_outputs, wall_time: started.elapsed().as_secs_f64() })
    }

    fn finish_node(&self, node: NodeId, result: &ExperimentResult) -> Result<(), ExecError> {
        self.record_best(node, result).map_err(|e| ExecError::ExecutorUnavailable(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::executor::delegate_plan;
    use crate::search::tests::plan_with;

    fn client(ws: &Path, timeout_ms: u64) -> JobClient {
        JobClient::new(ws, Duration::from_millis(5), Duration::from_millis(timeout_ms))
    }

    #[test]
    fn fake_bridge_completes_jobs() {
        let dir = tempfile::tempdir().unwrap();
        let c = client(dir.path(), 2000);
        let spec = JobSpec::new("j1", JobKind::ExportDataset, json!({"source_id": "x/y", "split": "train", "output": "datasets/x.jsonl"}));
        c.submit_job(&spec).unwrap();
        assert_eq!(c.poll_job("j1").unwrap().state, JobState::Queued);
        let bridge = FakeBridge::new(dir.path());
        assert_eq!(bridge.process_pending().unwrap(), 1);
        let s = c.poll_job("j1").unwrap();
        assert_eq!(s.state, JobState::Succeeded);
        assert!(dir.path().join("jobs/done/j1.json").exists());
        let ds = crate::aidp::load_local_dataset(&dir.path().join("datasets/x.jsonl"), Default::default()).unwrap();
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn no_bridge_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let c = client(dir.path(), 30);
        let spec = JobSpec::new("j2", JobKind::Finetune, json!({}));
        c.submit_job(&spec).unwrap();
        assert!(matches!(c.wait("j2"), Err(JobError::Timeout { .. })));
        let s = c.poll_job("j2").unwrap();
        assert_eq!((s.state, s.error_kind.as_deref()), (JobState::Failed, Some("timeout")));
    }

    #[test]
    fn malformed_status_names_the_job() {
        let dir = tempfile::tempdir().unwrap();
        let c = client(dir.path(), 30);
        std::fs::create_dir_all(dir.path().join("jobs/done")).unwrap();
        std::fs::write(c.dirs.status("j3"), "{ not json").unwrap();
        match c.poll_job("j3") {
            Err(JobError::CorruptState { job_id, .. }) => assert_eq!(job_id, "j3"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn heartbeat_gate() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = client(dir.path(), 30);
        c.require_heartbeat = Some(Duration::from_secs(60));
        let spec = JobSpec::new("j4", JobKind::Evaluate, json!({}));
        assert!(matches!(c.submit_job(&spec), Err(JobError::BridgeUnavailable(_))));
        FakeBridge::new(dir.path()).touch_heartbeat().unwrap();
        c.submit_job(&spec).unwrap();
    }

    #[test]
    fn remote_source_maps_failures() {
        let dir = tempfile::tempdir().unwrap();
        let handle = FakeBridge::new(dir.path()).spawn(Duration::from_millis(2));
        let src = JobRemoteSource { client: client(dir.path(), 5000) };
        assert!(src.export("org/data", Some("train")).unwrap().exists());
        assert_eq!(src.export("unknown/data", Some("train")), Err(RemoteError::UnknownSource("unknown/data".into())));
        assert!(matches!(src.export("org/data", None), Err(RemoteError::SplitRequired(_))));
        handle.stop();
    }

    #[test]
    fn bridge_executor_runs_a_plan() {
        let dir = tempfile::tempdir().unwrap();
        let handle = FakeBridge::new(dir.path()).spawn(Duration::from_millis(2));
        let task = crate::agents::plan::tests::task();
        let exec = BridgeExecutor::new(
            client(dir.path(), 5000),
            Arc::new(OperatorRegistry::with_builtins()),
            OpEnv::new(dir.path()),
            &task,
        );
        let d = delegate_plan(&plan_with(3, 1e-4), &exec, NodeId(2), 3).unwrap();
        handle.stop();
        assert_eq!(d.result.ok_count(), 3);
        assert_eq!(d.result.best_config_id.as_deref(), Some("c0"));
        assert_eq!(d.eval_outputs.len(), 1);
        exec.record_best(NodeId(2), &d.result).unwrap();
        assert_eq!(exec.resolve_base("node:2"), "models/2/c0");
    }
}
