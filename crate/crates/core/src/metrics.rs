//! Rewards, relative gains, score trajectories and their frontiers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ExperimentTree, MetricSpec, NodeId, StrategyKind};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric range [{lo}, {hi}] is degenerate")]
    DegenerateRange { lo: f64, hi: f64 },
    #[error("gain is undefined when the reference score equals the base score ({0})")]
    UndefinedGain(f64),
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("trajectory indices must increase strictly from 1")]
    BadIndices,
    #[error("scores file: {0}")]
    BadScores(String),
}

/// Maps a raw score into [0, 1] over the metric's declared range.
pub fn normalize_reward(score: f64, lo: f64, hi: f64) -> Result<f64, MetricsError> {
    if !(lo < hi) {
        return Err(MetricsError::DegenerateRange { lo, hi });
    }
    Ok(((score - lo) / (hi - lo)).clamp(0.0, 1.0))
}

pub fn normalize_for(score: f64, metric: &MetricSpec) -> Result<f64, MetricsError> {
    normalize_reward(score, metric.lo, metric.hi)
}

/// `(ft - base) / (reference - base)`, unclamped.
pub fn relative_gain(ft: f64, base: f64, reference: f64) -> Result<f64, MetricsError> {
    if reference == base {
        return Err(MetricsError::UndefinedGain(base));
    }
    Ok((ft - base) / (reference - base))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainReport {
    pub base_score: f64,
    pub ref_score: f64,
    pub ft_score: f64,
    pub gain: f64,
}

impl GainReport {
    pub fn new(ft_score: f64, base_score: f64, ref_score: f64) -> Result<Self, MetricsError> {
        Ok(Self { base_score, ref_score, ft_score, gain: relative_gain(ft_score, base_score, ref_score)? })
    }

    /// Whole-percent rendering, e.g. `+849%`.
    pub fn percent(&self) -> String {
        format!("{:+.0}%", self.gain * 100.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    /// `None` for a failed iteration.
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn from_scores(task_id: impl Into<String>, scores: &[Option<f64>]) -> Self {
        Self {
            task_id: task_id.into(),
            points: scores
                .iter()
                .enumerate()
                .map(|(i, s)| TrajectoryPoint { iteration: i + 1, score: *s })
                .collect(),
        }
    }

    pub fn scores(&self) -> Vec<Option<f64>> {
        self.points.iter().map(|p| p.score).collect()
    }

    fn check(&self) -> Result<(), MetricsError> {
        if self.points.is_empty() {
            return Err(MetricsError::EmptyTrajectory);
        }
        let ordered = self.points.first().map(|p| p.iteration) == Some(1)
            && self.points.windows(2).all(|w| w[0].iteration < w[1].iteration);
        if !ordered {
            return Err(MetricsError::BadIndices);
        }
        Ok(())
    }
}

/// Running maximum over the non-null scores. A null inherits the previous
/// frontier value (and stays null before the first score).
pub fn frontier(traj: &Trajectory) -> Result<Trajectory, MetricsError> {
    traj.check()?;
    let mut best: Option<f64> = None;
    let points = traj
        .points
        .iter()
        .map(|p| {
            if let Some(s) = p.score {
                best = Some(best.map_or(s, |b| b.max(s)));
            }
            TrajectoryPoint { iteration: p.iteration, score: best }
        })
        .collect();
    Ok(Trajectory { task_id: traj.task_id.clone(), points })
}

/// One row per completed node, in completion (node id) order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub score: Option<f64>,
    pub frontier: Option<f64>,
    pub strategy: Option<StrategyKind>,
    pub node_id: NodeId,
}

pub fn trajectory_rows(tree: &ExperimentTree) -> Vec<TrajectoryRow> {
    let mut best: Option<f64> = None;
    tree.nodes()
        .filter(|n| n.status.is_complete())
        .enumerate()
        .map(|(i, n)| {
            let score = n.best_raw_score();
            if let Some(s) = score {
                best = Some(best.map_or(s, |b| b.max(s)));
            }
            TrajectoryRow { iteration: i + 1, score, frontier: best, strategy: n.strategy(), node_id: n.id }
        })
        .collect()
}

pub fn trajectory_of(tree: &ExperimentTree, task_id: &str) -> Trajectory {
    let scores: Vec<Option<f64>> = trajectory_rows(tree).iter().map(|r| r.score).collect();
    Trajectory::from_scores(task_id, &scores)
}

pub const TRAJECTORY_HEADER: &str = "iteration,score,frontier,strategy,node_id";

/// CSV with columns `iteration,score,frontier,strategy,node_id`. Scores use six
/// decimals; a failed iteration has an empty score; `strategy` is the slug or
/// `none` when the node has no plan; `node_id` is the bare number.
pub fn emit_trajectory_data(tree: &ExperimentTree) -> String {
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for r in trajectory_rows(tree) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iteration,
            fmt(r.score),
            fmt(r.frontier),
            r.strategy.map_or("none", StrategyKind::slug),
            r.node_id.0
        );
    }
    out
}

/// Parses the frontier column back out of trajectory CSV text.
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<(usize, Option<f64>, Option<f64>)>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRAJECTORY_HEADER => {}
        other => return Err(format!("unexpected header {other:?}")),
    }
    let num = |s: &str| -> Result<Option<f64>, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| format!("bad number `{s}`: {e}"))
        }
    };
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 5 {
                return Err(format!("row {}: expected 5 columns", i + 1));
            }
            let it = cols[0].parse().map_err(|e| format!("row {}: {e}", i + 1))?;
            Ok((it, num(cols[1])?, num(cols[2])?))
        })
        .collect()
}

/// One row of a scores file: a task's reference, base and fine-tuned scores.
///
/// Required CSV columns are `task`, `ref_score`, `base_score` and `ft_score`.
/// `metric`, `backend` and `reported_gain_pct` are optional; any other column
/// is ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub task: String,
    #[serde(default)]
    pub metric: Option<String>,
    #[serde(default)]
    pub backend: Option<String>,
    pub ref_score: f64,
    pub base_score: f64,
    pub ft_score: f64,
    #[serde(default)]
    pub reported_gain_pct: Option<f64>,
}

impl ScoreRow {
    pub fn gain(&self) -> Result<GainReport, MetricsError> {
        GainReport::new(self.ft_score, self.base_score, self.ref_score)
    }
}

pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoreRow>, MetricsError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let rows = reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| MetricsError::BadScores(format!("row {}: {e}", i + 1))))
        .collect::<Result<Vec<ScoreRow>, _>>()?;
    if rows.is_empty() {
        return Err(MetricsError::BadScores("no rows".into()));
    }
    Ok(rows)
}

/// Tab-separated gain table: task, backend, ref, base, ft, gain.
pub fn gains_table(rows: &[ScoreRow]) -> Result<String, MetricsError> {
    let mut out = String::from("task\tbackend\tref\tbase\tft\tgain\n");
    for r in rows {
        let g = r.gain()?;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.task,
            r.backend.as_deref().unwrap_or("-"),
            r.ref_score,
            r.base_score,
            r.ft_score,
            g.percent()
        );
    }
    Ok(out)
}
