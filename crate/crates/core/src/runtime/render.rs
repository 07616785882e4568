//! Text and SVG views of a run.

use std::fmt::Write as _;

use crate::metrics::trajectory_rows;
use crate::model::{ExperimentTree, NodeId};
use crate::search::{parent_visits, uct_score, UctParams};

/// Box-drawing tree with visit count, total reward, UCT value and status per
/// node. UCT is shown as `-` where it is undefined (no visits yet).
pub fn render_tree(tree: &ExperimentTree, params: &UctParams) -> String {
    let mut out = String::new();
    if let Some(root) = tree.root() {
        line(tree, params, root, "", "", &mut out);
    }
    out
}

fn line(tree: &ExperimentTree, params: &UctParams, id: NodeId, lead: &str, child_lead: &str, out: &mut String) {
    let Some(n) = tree.get(id) else { return };
    let uct = uct_score(n, parent_visits(tree, n), params).map_or("-".to_string(), |u| format!("{u:.4}"));
    let score = n.best_raw_score().map_or("-".to_string(), |s| format!("{s:.4}"));
    let strategy = n.strategy().map_or("(no plan)", |s| s.label());
    let _ = writeln!(
        out,
        "{lead}{} {strategy} [{}] score={score} N={} Q={:.4} UCT={uct}",
        n.id, n.status, n.visits, n.total_reward
    );
    for (i, c) in n.children.iter().enumerate() {
        let last = i + 1 == n.children.len();
        let (branch, cont) = if last { ("└── ", "    ") } else { ("├── ", "│   ") };
        line(tree, params, *c, &format!("{child_lead}{branch}"), &format!("{child_lead}{cont}"), out);
    }
}

/// Per-iteration scores (dots) and the best-so-far frontier (step line) of a
/// tree.
pub fn render_svg(tree: &ExperimentTree, title: &str) -> String {
    let points: Vec<TrajectoryPoint> =
        trajectory_rows(tree).into_iter().map(|r| (r.iteration, r.score, r.frontier)).collect();
    render_trajectory_svg(&points, title)
}

/// `(iteration, score, frontier)` as parsed from trajectory CSV.
pub type TrajectoryPoint = (usize, Option<f64>, Option<f64>);

pub fn render_trajectory_svg(rows: &[TrajectoryPoint], title: &str) -> String {
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let n = rows.len().max(2) as f64;
    let (lo, hi) = rows
        .iter()
        .flat_map(|r| r.1)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s), b.max(s)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else if lo.is_finite() { (lo - 0.5, lo + 0.5) } else { (0.0, 1.0) };
    let x = |i: usize| pad + (i as f64 - 1.0) / (n - 1.0) * (w - 2.0 * pad);
    let y = |v: f64| h - pad - (v - lo) / (hi - lo) * (h - 2.0 * pad);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(out, r#"<text x="{pad}" y="20" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        out,
        r#"<polyline fill="none" stroke="black" points="{pad},{pad} {pad},{} {},{}"/>"#,
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(out, r#"<text x="4" y="{}" font-size="10">{lo:.3}</text>"#, h - pad);
    let _ = writeln!(out, r#"<text x="4" y="{pad}" font-size="10">{hi:.3}</text>"#);
    let mut points = Vec::new();
    for &(iteration, _, frontier) in rows {
        if let Some(f) = frontier {
            if let Some((_, prev)) = points.last().copied() {
                points.push((x(iteration), prev));
            }
            points.push((x(iteration), y(f)));
        }
    }
    let pts: Vec<String> = points.iter().map(|(a, b)| format!("{a:.1},{b:.1}")).collect();
    let _ = writeln!(out, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" "));
    for &(iteration, score, _) in rows {
        match score {
            Some(s) => {
                let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="gray"/>"#, x(iteration), y(s));
            }
            None => {
                let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" fill="red">x</text>"#, x(iteration) - 3.0, h - pad - 4.0);
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
