//! Persistence of the run state.
//!
//! The file store keeps everything needed to resume in
//! `<workspace>/state/tree.json`, rewritten atomically after every state
//! transition. The document carries a `schema_version`; loading any other
//! version, or a truncated file, is a `CorruptState` error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::diagnostics::EvalReport;
use crate::model::ExperimentTree;
use crate::runtime::RuntimeError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub schema_version: u32,
    pub task_id: String,
    pub master_seed: u64,
    pub policy: String,
    pub tree: ExperimentTree,
    /// Evaluation reports by node id, kept for later comparisons.
    #[serde(default)]
    pub reports: BTreeMap<u64, EvalReport>,
    /// Persisted transitions so far.
    #[serde(default)]
    pub transitions: u64,
    #[serde(default)]
    pub finished: bool,
}

impl RunState {
    pub fn new(task_id: impl Into<String>, master_seed: u64, policy: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            task_id: task_id.into(),
            master_seed,
            policy: policy.into(),
            tree: ExperimentTree::new(),
            reports: BTreeMap::new(),
            transitions: 0,
            finished: false,
        }
    }
}

pub trait StateStore: Send + Sync {
    fn save(&self, state: &RunState) -> Result<(), RuntimeError>;
    /// `None` when nothing has been saved yet.
    fn load(&self) -> Result<Option<RunState>, RuntimeError>;

    /// Where the state lives, for messages.
    fn location(&self) -> PathBuf {
        PathBuf::from("<memory>")
    }
}

#[derive(Clone, Debug)]
pub struct FileStore {
    path: PathBuf,
}

impl FileStore {
    pub fn new(workspace: &Path) -> Self {
        Self { path: workspace.join("state").join("tree.json") }
    }

    pub fn at(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn persist_tree(state: &RunState, path: &Path) -> Result<(), RuntimeError> {
    let mut text = serde_json::to_string_pretty(state).expect("state serializes");
    text.push('\n');
    crate::util::atomic_write(path, text.as_bytes()).map_err(|e| RuntimeError::io(path, e))
}

pub fn load_tree(path: &Path) -> Result<RunState, RuntimeError> {
    let text = std::fs::read_to_string(path).map_err(|e| RuntimeError::CorruptState {
        path: path.to_path_buf(),
        detail: format!("cannot read: {e}"),
    })?;
    parse_state(&text, path)
}

fn parse_state(text: &str, path: &Path) -> Result<RunState, RuntimeError> {
    let corrupt = |detail: String| RuntimeError::CorruptState { path: path.to_path_buf(), detail };
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| corrupt(format!("not valid JSON: {e}")))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => return Err(corrupt(format!("schema version {v}, expected {SCHEMA_VERSION}"))),
        None => return Err(corrupt("missing schema_version".into())),
    }
    let state: RunState = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    state.tree.check_consistency().map_err(|e| corrupt(format!("inconsistent tree: {e}")))?;
    Ok(state)
}

impl StateStore for FileStore {
    fn save(&self, state: &RunState) -> Result<(), RuntimeError> {
        persist_tree(state, &self.path)
    }

    fn load(&self) -> Result<Option<RunState>, RuntimeError> {
        if !self.path.exists() {
            return Ok(None);
        }
        load_tree(&self.path).map(Some)
    }

    fn location(&self) -> PathBuf {
        self.path.clone()
    }
}

/// Keeps the latest state in memory; for batch experiments and tests.
#[derive(Debug, Default)]
pub struct MemoryStore {
    state: Mutex<Option<RunState>>,
}

impl StateStore for MemoryStore {
    fn save(&self, state: &RunState) -> Result<(), RuntimeError> {
        *self.state.lock().expect("lock") = Some(state.clone());
        Ok(())
    }

    fn load(&self) -> Result<Option<RunState>, RuntimeError> {
        Ok(self.state.lock().expect("lock").clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::tests::random_tree;

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::new(dir.path());
        assert_eq!(store.load().unwrap(), None);
        let mut s = RunState::new("t", 1, "mcts");
        store.save(&s).unwrap();
        assert_eq!(store.load().unwrap(), Some(s.clone()));
        s.tree = random_tree(9, 20);
        store.save(&s).unwrap();
        assert_eq!(store.load().unwrap(), Some(s));
    }

    #[test]
    fn truncated_and_foreign_files_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::new(dir.path());
        let mut s = RunState::new("t", 1, "mcts");
        s.tree = random_tree(3, 12);
        store.save(&s).unwrap();
        let text = std::fs::read_to_string(store.path()).unwrap();
        std::fs::write(store.path(), &text[..text.len() / 2]).unwrap();
        assert!(matches!(store.load(), Err(RuntimeError::CorruptState { .. })));
        std::fs::write(store.path(), text.replace("\"schema_version\": 1", "\"schema_version\": 9")).unwrap();
        match store.load() {
            Err(RuntimeError::CorruptState { detail, .. }) => assert!(detail.contains("schema version 9")),
            other => panic!("{other:?}"),
        }
    }
}
