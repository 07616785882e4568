//! Run configuration, loaded from TOML.
//!
//! ```toml
//! task = "task.toml"            # relative to this file
//! workspace = "ws"              # relative to this file
//! seed = 7
//! policy = "mcts"               # mcts | gbfs | ses
//! exploration = 1.4142135623730951
//! researcher = "scripted"       # scripted | llm
//! executor = "simulated"        # simulated | bridge
//! landscape = "landscape.toml"  # simulated executor only; default: shipped deceptive landscape
//! bad_case_analysis = true
//!
//! [budgets]
//! iterations = 20
//! wall_clock_secs = 3600
//! concurrent_jobs = 5
//!
//! [memory]
//! budget_chars = 16000
//! gain_threshold = 0.1
//!
//! [diagnostics]
//! analysis_limit = 30
//! labeler = "keyword"           # keyword | llm
//!
//! [researcher_backend]          # required for researcher = "llm"
//! endpoint = "http://localhost:8000/v1"
//! model = "some-model"
//!
//! [bridge]
//! poll_interval_ms = 200
//! timeout_secs = 86400
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::chat::BackendConfig;
use crate::memory::{CriticalThresholds, DEFAULT_BUDGET};
use crate::runtime::RuntimeError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    /// Defaults to the task's `max_iterations`; never exceeds it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<u64>,
    #[serde(default = "default_jobs")]
    pub concurrent_jobs: usize,
}

fn default_jobs() -> usize {
    5
}

impl Default for Budgets {
    fn default() -> Self {
        Self { iterations: None, wall_clock_secs: None, concurrent_jobs: default_jobs() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub budget_chars: usize,
    pub gain_threshold: f64,
    pub max_failed: usize,
    pub max_critical: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        let t = CriticalThresholds::default();
        Self { budget_chars: DEFAULT_BUDGET, gain_threshold: t.gain_threshold, max_failed: t.max_failed, max_critical: t.cap }
    }
}

impl MemoryConfig {
    pub fn thresholds(&self) -> CriticalThresholds {
        CriticalThresholds { gain_threshold: self.gain_threshold, max_failed: self.max_failed, cap: self.max_critical }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub analysis_limit: usize,
    pub labeler: String,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { analysis_limit: crate::diagnostics::DEFAULT_ANALYSIS_LIMIT, labeler: "keyword".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    pub poll_interval_ms: u64,
    pub timeout_secs: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self { poll_interval_ms: 200, timeout_secs: 24.0 * 3600.0 }
    }
}

fn default_policy() -> String {
    "mcts".into()
}
fn default_researcher() -> String {
    "scripted".into()
}
fn default_executor() -> String {
    "simulated".into()
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: PathBuf,
    pub workspace: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_policy")]
    pub policy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploration: Option<f64>,
    #[serde(default = "default_researcher")]
    pub researcher: String,
    #[serde(default = "default_executor")]
    pub executor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landscape: Option<PathBuf>,
    #[serde(default = "yes")]
    pub bad_case_analysis: bool,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub researcher_backend: Option<BackendConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_backend: Option<BackendConfig>,
    #[serde(default)]
    pub bridge: BridgeConfig,
}

impl RunConfig {
    /// A simulated run with every default.
    pub fn simulated(task: impl Into<PathBuf>, workspace: impl Into<PathBuf>, seed: u64) -> Self {
        toml::from_str::<RunConfig>("task = \"\"\nworkspace = \"\"")
            .map(|mut c| {
                c.task = task.into();
                c.workspace = workspace.into();
                c.seed = seed;
                c
            })
            .expect("defaults parse")
    }

    /// Parses TOML; relative paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self, RuntimeError> {
        let mut c: RunConfig = toml::from_str(text).map_err(|e| RuntimeError::Config(e.to_string()))?;
        if let Some(dir) = base_dir {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            fix(&mut c.task);
            fix(&mut c.workspace);
            if let Some(l) = c.landscape.as_mut() {
                fix(l);
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, RuntimeError> {
        let text = std::fs::read_to_string(path).map_err(|e| RuntimeError::io(path, e))?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        let bad = |m: &str| Err(RuntimeError::Config(m.to_string()));
        if self.budgets.iterations == Some(0) {
            return bad("budgets.iterations must be positive");
        }
        if self.budgets.wall_clock_secs == Some(0) {
            return bad("budgets.wall_clock_secs must be positive");
        }
        if self.budgets.concurrent_jobs == 0 {
            return bad("budgets.concurrent_jobs must be positive");
        }
        if self.memory.budget_chars == 0 {
            return bad("memory.budget_chars must be positive");
        }
        if let Some(c) = self.exploration {
            if !(c >= 0.0 && c.is_finite()) {
                return bad("exploration must be a finite number >= 0");
            }
        }
        for b in self.researcher_backend.iter().chain(&self.judge_backend) {
            b.validate().map_err(RuntimeError::Config)?;
        }
        if !(self.bridge.timeout_secs > 0.0) {
            return bad("bridge.timeout_secs must be positive");
        }
        Ok(())
    }

    /// The iteration budget, capped by the task's `max_iterations`.
    pub fn iteration_budget(&self, task_max: usize) -> usize {
        self.budgets.iterations.map_or(task_max, |b| b.min(task_max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_relative_paths() {
        let c = RunConfig::from_toml_str("task = \"t.toml\"\nworkspace = \"ws\"\nseed = 3", Some(Path::new("/cfg"))).unwrap();
        assert_eq!(c.task, PathBuf::from("/cfg/t.toml"));
        assert_eq!(c.workspace, PathBuf::from("/cfg/ws"));
        assert_eq!(c.policy, "mcts");
        assert!(c.bad_case_analysis);
        assert_eq!(c.iteration_budget(20), 20);
        assert_eq!(RunConfig::simulated("a", "b", 3).seed, 3);
    }

    #[test]
    fn rejects_nonpositive_budgets() {
        for bad in ["[budgets]\niterations = 0", "[budgets]\nconcurrent_jobs = 0", "exploration = -1.0", "surprise = 1"] {
            let text = format!("task = \"t\"\nworkspace = \"w\"\n{bad}");
            assert!(matches!(RunConfig::from_toml_str(&text, None), Err(RuntimeError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn iteration_budget_never_exceeds_task() {
        let mut c = RunConfig::simulated("a", "b", 0);
        c.budgets.iterations = Some(50);
        assert_eq!(c.iteration_budget(20), 20);
        c.budgets.iterations = Some(5);
        assert_eq!(c.iteration_budget(20), 5);
    }
}
