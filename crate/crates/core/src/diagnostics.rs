//! Bad-case extraction, failure attribution, comparison against earlier
//! experiments, and the per-node evaluation report.
//!
//! Text reports use these headers, in order:
//!
//! ```text
//! == Metrics ==
//! == Configurations ==
//! == Bad Case Categories ==
//! == Bad Cases ==
//! == Comparison ==
//! == Synthesis ==
//! ```
//!
//! With bad-case analysis disabled the two case sections are omitted.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::chat::{ChatBackend, ChatMessage, EndpointError};
use crate::model::{ConfigStatus, ExperimentResult, MatchRule, NodeId, TaskDefinition};
use crate::util::{clip, one_line};

pub const DEFAULT_ANALYSIS_LIMIT: usize = 30;
/// Longest diagnosis digest stored on a node.
pub const DIGEST_CAP: usize = 600;

pub const METRICS_HEADER: &str = "== Metrics ==";
pub const CONFIGS_HEADER: &str = "== Configurations ==";
pub const CATEGORIES_HEADER: &str = "== Bad Case Categories ==";
pub const CASES_HEADER: &str = "== Bad Cases ==";
pub const COMPARISON_HEADER: &str = "== Comparison ==";
pub const SYNTHESIS_HEADER: &str = "== Synthesis ==";

const INPUT_DIGEST_CAP: usize = 160;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("attribution needs at least one case")]
    NoCases,
    #[error("attribution endpoint failed: {0}")]
    Endpoint(#[from] EndpointError),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One evaluated validation example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub input: String,
    pub expected: String,
    pub actual: String,
    /// Per-example metric in [0, 1] when the evaluator reports one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

pub fn parse_eval_outputs(text: &str) -> Result<Vec<EvalOutput>, DiagError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| DiagError::Schema(format!("line {}: {e}", i + 1))))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BadCase {
    /// Position in the evaluation outputs.
    pub index: usize,
    pub input: String,
    pub expected: String,
    pub actual: String,
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

fn case_delta(out: &EvalOutput, rule: &MatchRule) -> f64 {
    if let Some(s) = out.score {
        return (1.0 - s).clamp(0.0, 1.0);
    }
    if let MatchRule::Numeric { .. } = rule {
        if let (Ok(e), Ok(a)) = (out.expected.trim().parse::<f64>(), out.actual.trim().parse::<f64>()) {
            return (e - a).abs();
        }
    }
    1.0
}

/// Outputs that fail the task's match rule, worst first (input order on
/// ties), at most `limit`.
pub fn extract_bad_cases(outputs: &[EvalOutput], task: &TaskDefinition, limit: usize) -> Vec<BadCase> {
    let mut cases: Vec<BadCase> = outputs
        .iter()
        .enumerate()
        .filter(|(_, o)| !task.match_rule.matches(&o.expected, &o.actual))
        .map(|(index, o)| BadCase {
            index,
            input: clip(&one_line(&o.input), INPUT_DIGEST_CAP),
            expected: o.expected.clone(),
            actual: o.actual.clone(),
            delta: case_delta(o, &task.match_rule),
            label: None,
        })
        .collect();
    cases.sort_by(|a, b| b.delta.total_cmp(&a.delta).then(a.index.cmp(&b.index)));
    cases.truncate(limit);
    cases
}

/// Lowercase, dash-separated, at most 40 characters; `unlabeled` if empty.
pub fn normalize_label(reply: &str) -> String {
    let first = reply.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let first = first.strip_prefix("label:").or_else(|| first.strip_prefix("Label:")).unwrap_or(first);
    let mut out = String::new();
    for c in first.trim().chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') && !out.is_empty() {
            out.push('-');
        }
        if out.len() >= 40 {
            break;
        }
    }
    let out = out.trim_end_matches('-').to_string();
    if out.is_empty() {
        "unlabeled".into()
    } else {
        out
    }
}

pub type Histogram = BTreeMap<String, usize>;

/// Asks the backend for one category label per case.
pub fn attribute_failures(
    cases: &[BadCase],
    backend: &dyn ChatBackend,
) -> Result<(Vec<BadCase>, Histogram), DiagError> {
    if cases.is_empty() {
        return Err(DiagError::NoCases);
    }
    let system = ChatMessage::system(
        "You attribute model failures. Reply with one short category label such as \
         format-error, hallucination, truncation, wrong-reasoning or knowledge-gap.",
    );
    let mut labeled = Vec::with_capacity(cases.len());
    let mut hist = Histogram::new();
    for c in cases {
        let prompt = format!("Input: {}\nExpected: {}\nActual: {}\nLabel:", c.input, c.expected, c.actual);
        let reply = backend.complete(&[system.clone(), ChatMessage::user(prompt)])?;
        let label = normalize_label(&reply);
        *hist.entry(label.clone()).or_default() += 1;
        labeled.push(BadCase { label: Some(label), ..c.clone() });
    }
    Ok((labeled, hist))
}

/// A heuristic labeler usable in place of a model: tags a case by keywords in
/// its actual output. Intended for offline runs.
#[derive(Clone, Debug, Default)]
pub struct KeywordLabeler;

impl ChatBackend for KeywordLabeler {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, EndpointError> {
        let text = messages.last().map(|m| m.content.to_lowercase()).unwrap_or_default();
        let actual = text.split("actual:").nth(1).unwrap_or(&text);
        let label = if actual.contains("format") || actual.contains("unparseable") {
            "format-error"
        } else if actual.contains("truncat") || actual.trim_end().ends_with("...") {
            "truncation"
        } else if actual.contains("hallucinat") || actual.contains("invented") {
            "hallucination"
        } else if actual.trim().lines().next().unwrap_or("").trim().is_empty() {
            "empty-output"
        } else {
            "wrong-answer"
        };
        Ok(label.into())
    }

    fn model(&self) -> &str {
        "keyword-labeler"
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub verdict: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_vs_parent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_vs_best: Option<f64>,
    /// Current histogram minus the parent's, nonzero entries only.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub category_shift: BTreeMap<String, i64>,
}

pub fn histogram_shift(current: &Histogram, previous: &Histogram) -> BTreeMap<String, i64> {
    let mut out = BTreeMap::new();
    for k in current.keys().chain(previous.keys()) {
        let d = *current.get(k).unwrap_or(&0) as i64 - *previous.get(k).unwrap_or(&0) as i64;
        if d != 0 {
            out.insert(k.clone(), d);
        }
    }
    out
}

/// Deltas of the primary score against the parent's report and against the
/// best earlier report. `history` is every earlier report, parent included.
pub fn compare_experiments(current: &EvalReport, parent: Option<&EvalReport>, history: &[EvalReport]) -> Comparison {
    if parent.is_none() && history.is_empty() {
        return Comparison { verdict: "baseline".into(), ..Comparison::default() };
    }
    let best = history.iter().filter_map(|r| r.primary_score).fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))));
    let delta = |other: Option<f64>| match (current.primary_score, other) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    let delta_vs_parent = delta(parent.and_then(|p| p.primary_score));
    let delta_vs_best = delta(best);
    let category_shift = match parent {
        Some(p) if current.bad_case_analysis && p.bad_case_analysis => histogram_shift(&current.histogram, &p.histogram),
        _ => BTreeMap::new(),
    };
    let verdict = match (current.primary_score, delta_vs_parent, delta_vs_best) {
        (None, _, _) => "failed".to_string(),
        (_, _, Some(d)) if d > 0.0 => format!("new best (+{d:.4} over previous best)"),
        (_, Some(d), _) if d > 0.0 => format!("improved over parent (+{d:.4})"),
        (_, Some(d), _) if d < 0.0 => format!("regressed from parent ({d:.4})"),
        (_, Some(_), _) => "unchanged from parent".to_string(),
        _ => "no comparable parent score".to_string(),
    };
    Comparison { verdict, delta_vs_parent, delta_vs_best, category_shift }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigRow {
    pub config_id: String,
    pub status: ConfigStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_score: Option<f64>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub log_excerpt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub node_id: NodeId,
    pub metric: String,
    pub primary_score: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
    pub configs: Vec<ConfigRow>,
    pub bad_case_analysis: bool,
    #[serde(default)]
    pub histogram: Histogram,
    #[serde(default)]
    pub cases: Vec<BadCase>,
    #[serde(default)]
    pub comparison: Comparison,
    pub synthesis: String,
}

impl EvalReport {
    /// The report before comparison and synthesis are filled in.
    pub fn draft(
        node_id: NodeId,
        task: &TaskDefinition,
        result: &ExperimentResult,
        cases: Vec<BadCase>,
        histogram: Histogram,
        bad_case_analysis: bool,
    ) -> Self {
        let ok: Vec<f64> = result.per_config.iter().filter(|c| c.status == ConfigStatus::Ok).filter_map(|c| c.raw_score).collect();
        let mut metrics = BTreeMap::new();
        if let Some(b) = result.best_raw_score {
            metrics.insert(task.primary_metric.name.clone(), b);
        }
        if !ok.is_empty() {
            metrics.insert("mean_config_score".into(), ok.iter().sum::<f64>() / ok.len() as f64);
        }
        metrics.insert("configs_ok".into(), ok.len() as f64);
        metrics.insert("configs_failed".into(), (result.per_config.len() - ok.len()) as f64);
        let (cases, histogram) = if bad_case_analysis { (cases, histogram) } else { (Vec::new(), Histogram::new()) };
        Self {
            node_id,
            metric: task.primary_metric.name.clone(),
            primary_score: result.best_raw_score,
            metrics,
            configs: result
                .per_config
                .iter()
                .map(|c| ConfigRow {
                    config_id: c.config_id.clone(),
                    status: c.status,
                    raw_score: c.raw_score,
                    log_excerpt: clip(&one_line(&c.log_excerpt), 160),
                })
                .collect(),
            bad_case_analysis,
            histogram,
            cases,
            comparison: Comparison::default(),
            synthesis: String::new(),
        }
    }

    /// Short text stored as the node's diagnosis, at most [`DIGEST_CAP`]
    /// characters.
    pub fn digest(&self) -> String {
        let mut s = match self.primary_score {
            Some(p) => format!("{} {p:.4}", self.metric),
            None => "all configurations failed".to_string(),
        };
        let _ = write!(s, "; {}", self.comparison.verdict);
        if self.bad_case_analysis && !self.histogram.is_empty() {
            let top: Vec<String> = top_categories(&self.histogram, 3).iter().map(|(k, v)| format!("{k} x{v}")).collect();
            let _ = write!(s, "; bad cases: {}", top.join(", "));
        }
        clip(&s, DIGEST_CAP)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Report for node {}", self.node_id);
        let _ = writeln!(out, "{METRICS_HEADER}");
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "{k}\t{v:.6}");
        }
        let _ = writeln!(out, "{CONFIGS_HEADER}");
        for c in &self.configs {
            let score = c.raw_score.map_or("-".to_string(), |s| format!("{s:.6}"));
            let status = match c.status {
                ConfigStatus::Ok => "ok",
                ConfigStatus::Failed => "failed",
            };
            let _ = write!(out, "{}\t{status}\t{score}", c.config_id);
            if !c.log_excerpt.is_empty() {
                let _ = write!(out, "\t{}", c.log_excerpt);
            }
            out.push('\n');
        }
        if self.bad_case_analysis {
            let _ = writeln!(out, "{CATEGORIES_HEADER}");
            for (k, v) in &self.histogram {
                let _ = writeln!(out, "{k}\t{v}");
            }
            let _ = writeln!(out, "{CASES_HEADER}");
            for c in &self.cases {
                let _ = writeln!(
                    out,
                    "[{}] {} | delta {:.4} | input: {} | expected: {} | actual: {}",
                    c.index,
                    c.label.as_deref().unwrap_or("unlabeled"),
                    c.delta,
                    c.input,
                    clip(&one_line(&c.expected), 120),
                    clip(&one_line(&c.actual), 120)
                );
            }
        }
        let _ = writeln!(out, "{COMPARISON_HEADER}");
        let _ = writeln!(out, "verdict\t{}", self.comparison.verdict);
        if let Some(d) = self.comparison.delta_vs_parent {
            let _ = writeln!(out, "vs_parent\t{d:+.6}");
        }
        if let Some(d) = self.comparison.delta_vs_best {
            let _ = writeln!(out, "vs_best\t{d:+.6}");
        }
        for (k, v) in &self.comparison.category_shift {
            let _ = writeln!(out, "shift\t{k}\t{v:+}");
        }
        let _ = writeln!(out, "{SYNTHESIS_HEADER}");
        let _ = writeln!(out, "{}", self.synthesis);
        out
    }
}

fn top_categories(h: &Histogram, n: usize) -> Vec<(&String, &usize)> {
    let mut v: Vec<_> = h.iter().collect();
    v.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    v.truncate(n);
    v
}

/// Sections of a rendered text report keyed by header.
pub fn report_sections(text: &str) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        if line.starts_with("== ") && line.ends_with(" ==") {
            current = Some(line.to_string());
            out.insert(line.to_string(), String::new());
        } else if let Some(h) = &current {
            let body = out.get_mut(h).expect("inserted");
            body.push_str(line);
            body.push('\n');
        }
    }
    out
}

/// Finishes the report: comparison, synthesis, and files under
/// `<workspace>/reports/` (`<node>.json` and `<node>.txt`) when a workspace is
/// given.
pub fn build_eval_report(
    mut draft: EvalReport,
    comparison: Comparison,
    workspace: Option<&Path>,
) -> Result<EvalReport, DiagError> {
    draft.comparison = comparison;
    let mut synthesis = match draft.primary_score {
        Some(s) => format!(
            "Best {} {s:.4} from {} of {} configurations; {}.",
            draft.metric,
            draft.configs.iter().filter(|c| c.status == ConfigStatus::Ok).count(),
            draft.configs.len(),
            draft.comparison.verdict
        ),
        None => format!("All {} configurations failed.", draft.configs.len()),
    };
    if draft.bad_case_analysis {
        if let Some((k, v)) = top_categories(&draft.histogram, 1).first() {
            let _ = write!(synthesis, " Dominant failure category: {k} ({v} of {} analyzed cases).", draft.cases.len());
        }
    }
    draft.synthesis = synthesis;
    if let Some(ws) = workspace {
        write_report(&draft, ws)?;
    }
    Ok(draft)
}

pub fn report_paths(workspace: &Path, node: NodeId) -> (PathBuf, PathBuf) {
    let dir = workspace.join("reports");
    (dir.join(format!("{}.json", node.0)), dir.join(format!("{}.txt", node.0)))
}

pub fn write_report(report: &EvalReport, workspace: &Path) -> Result<(), DiagError> {
    let (json, txt) = report_paths(workspace, report.node_id);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DiagError::Io { path, source }
    };
    let body = serde_json::to_string_pretty(report).expect("reports serialize") + "\n";
    crate::util::atomic_write(&json, body.as_bytes()).map_err(io(&json))?;
    crate::util::atomic_write(&txt, report.render_text().as_bytes()).map_err(io(&txt))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport, DiagError> {
    let text = std::fs::read_to_string(path).map_err(|source| DiagError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| DiagError::Schema(e.to_string()))
}
