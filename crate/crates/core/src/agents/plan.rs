//! Plan documents: prose sections for people plus a fenced JSON block the
//! engine parses.
//!
//! ````text
//! [Experiment Mission]
//! ...
//! [Training Data]
//! ...
//! [Core Training Strategy]
//! ...
//! ```json
//! {"mission": "...", "strategy": "adjust_training_scheme", "data_spec": {...}, "configs": [...]}
//! ```
//! ````

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aidp::{OperatorRegistry, PipelineSpec};
use crate::model::{ExperimentPlan, StrategyKind, TaskDefinition};

pub const MISSION_HEADER: &str = "[Experiment Mission]";
pub const DATA_HEADER: &str = "[Training Data]";
pub const STRATEGY_HEADER: &str = "[Core Training Strategy]";
pub const SECTION_HEADERS: [&str; 3] = [MISSION_HEADER, DATA_HEADER, STRATEGY_HEADER];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("plan document is missing the {0} section")]
    MissingSection(&'static str),
    #[error("plan block does not parse: {0}")]
    Schema(String),
    #[error("plan violates {0}")]
    Validation(String),
}

/// A researcher's plan as written, before parsing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub text: String,
}

impl PlanDocument {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }

    pub fn parse(&self) -> Result<ExperimentPlan, PlanError> {
        parse_plan(&self.text)
    }
}

/// Body of the first fenced block whose info string is one of `langs`
/// (an empty string matches a bare fence).
pub fn extract_fenced<'a>(text: &'a str, langs: &[&str]) -> Option<&'a str> {
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        let line_end = after.find('\n')?;
        let info = after[..line_end].trim();
        let body_start = line_end + 1;
        let close = after[body_start..].find("```")?;
        let body = &after[body_start..body_start + close];
        if langs.iter().any(|l| l.eq_ignore_ascii_case(info)) {
            return Some(body);
        }
        rest = &after[body_start + close + 3..];
    }
    None
}

/// Checks the section headers, then parses the fenced JSON block.
pub fn parse_plan(doc: &str) -> Result<ExperimentPlan, PlanError> {
    for header in SECTION_HEADERS {
        if !doc.contains(header) {
            return Err(PlanError::MissingSection(header));
        }
    }
    let body = extract_fenced(doc, &["json"])
        .ok_or_else(|| PlanError::Schema("no ```json block found".into()))?;
    let plan: ExperimentPlan = serde_json::from_str(body).map_err(|e| PlanError::Schema(e.to_string()))?;
    if plan.configs.is_empty() {
        return Err(PlanError::Validation("at least one training configuration is required".into()));
    }
    let mut ids = BTreeSet::new();
    for c in &plan.configs {
        c.check().map_err(PlanError::Validation)?;
        if !ids.insert(c.config_id.as_str()) {
            return Err(PlanError::Validation(format!("duplicate config_id `{}`", c.config_id)));
        }
    }
    Ok(plan)
}

/// Renders a plan as a document that [`parse_plan`] accepts.
pub fn render_plan(plan: &ExperimentPlan) -> PlanDocument {
    let mut out = String::new();
    let _ = writeln!(out, "{MISSION_HEADER}");
    let _ = writeln!(out, "Strategy: {}", plan.strategy);
    let _ = writeln!(out, "{}", plan.mission.trim());
    if !plan.rationale.trim().is_empty() {
        let _ = writeln!(out, "Rationale: {}", plan.rationale.trim());
    }
    let _ = writeln!(out, "\n{DATA_HEADER}");
    if plan.data_spec.steps.is_empty() {
        let _ = writeln!(out, "- Reuse existing datasets.");
    }
    for (i, s) in plan.data_spec.steps.iter().enumerate() {
        let inputs = if s.inputs.is_empty() { String::new() } else { format!(" <- {}", s.inputs.join(", ")) };
        let params = if s.params.is_null() { String::new() } else { format!(" {}", s.params) };
        let _ = writeln!(out, "- step {i}: {} = {}{}{}", s.output, s.op, inputs, params);
    }
    for (name, binding) in &plan.data_spec.outputs {
        let _ = writeln!(out, "- save {binding} to {}", PipelineSpec::output_path(name));
    }
    let _ = writeln!(out, "\n{STRATEGY_HEADER}");
    for c in &plan.configs {
        let _ = write!(
            out,
            "- {}: {:?} lr={} epochs={} batch={}x{} cutoff_len={}",
            c.config_id, c.finetuning_type, c.learning_rate, c.epochs, c.per_device_batch, c.grad_accum, c.cutoff_len
        );
        if let Some(r) = c.adapter_rank {
            let _ = write!(out, " rank={r}");
        }
        let _ = writeln!(out, " dataset={} base={}", c.dataset_path, c.base_model_path);
    }
    let _ = writeln!(out, "- Total number of experiments: {}", plan.configs.len());
    let json = serde_json::to_string_pretty(plan).expect("plans serialize");
    let _ = writeln!(out, "\n```json\n{json}\n```");
    PlanDocument { text: out }
}

/// Context-dependent rules a parsed plan must satisfy before execution.
#[derive(Clone, Copy, Debug)]
pub struct PlanRules<'a> {
    pub task: &'a TaskDefinition,
    pub at_root: bool,
    pub registry: &'a OperatorRegistry,
    /// Workspace-relative dataset paths that already exist.
    pub known_datasets: &'a BTreeSet<String>,
}

fn inside_workspace(rel: &str) -> bool {
    let p = Path::new(rel);
    !p.is_absolute() && p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

pub fn validate_plan(plan: &ExperimentPlan, rules: &PlanRules<'_>) -> Result<(), PlanError> {
    let v = |m: String| Err(PlanError::Validation(m));
    if rules.at_root && plan.strategy != StrategyKind::EstablishBaseline {
        return v(format!("the root plan must establish a baseline, got {}", plan.strategy));
    }
    if !rules.at_root && plan.strategy == StrategyKind::EstablishBaseline {
        return v("Establish Baseline is only legal at the root".into());
    }
    let constraints = &rules.task.constraints;
    let limit = plan.config_limit(constraints);
    if plan.configs.is_empty() || plan.configs.len() > limit {
        return v(format!("config count: {} configurations, allowed 1..={limit}", plan.configs.len()));
    }
    let mut ids = BTreeSet::new();
    for c in &plan.configs {
        c.check().map_err(PlanError::Validation)?;
        if !ids.insert(c.config_id.as_str()) {
            return v(format!("duplicate config_id `{}`", c.config_id));
        }
        if let Some(n) = c.train_samples() {
            if !(n >= 0.0) || n > constraints.max_train_samples as f64 {
                return v(format!(
                    "sample cap: {} requests {n} samples, cap is {}",
                    c.config_id, constraints.max_train_samples
                ));
            }
        }
    }
    plan.data_spec.validate(rules.registry).map_err(|e| PlanError::Validation(e.to_string()))?;
    let bounds = plan.data_spec.output_bounds(rules.registry).map_err(|e| PlanError::Validation(e.to_string()))?;
    for (name, bound) in &bounds {
        if let Some(b) = bound {
            if *b > constraints.max_train_samples {
                return v(format!(
                    "sample cap: output `{name}` may hold {b} records, cap is {}",
                    constraints.max_train_samples
                ));
            }
        }
    }
    let produced = plan.data_spec.output_paths();
    for c in &plan.configs {
        if !inside_workspace(&c.dataset_path) || !c.dataset_path.starts_with("datasets/") {
            return v(format!("dataset path: `{}` is not under the workspace datasets/ directory", c.dataset_path));
        }
        if !produced.contains(&c.dataset_path) && !rules.known_datasets.contains(&c.dataset_path) {
            return v(format!(
                "dataset path: `{}` is neither produced by the data pipeline nor already in the workspace",
                c.dataset_path
            ));
        }
    }
    Ok(())
}

pub fn parse_and_validate(doc: &str, rules: &PlanRules<'_>) -> Result<ExperimentPlan, PlanError> {
    let plan = parse_plan(doc)?;
    validate_plan(&plan, rules)?;
    Ok(plan)
}
