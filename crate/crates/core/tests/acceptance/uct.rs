use arbor_core::search::{parent_visits, uct_score, Mcts, SelectionPolicy, UctParams};
use arbor_core::{ExperimentNode, NodeId, NodeStatus};

use crate::trees::random_tree;
use crate::{ensure, fixtures, Outcome};

/// Independent brute force: every Done node, highest Q/N + c*sqrt(ln(Np)/N),
/// ties to the lowest id.
fn brute_force(tree: &arbor_core::ExperimentTree, c: f64) -> Option<NodeId> {
    let mut best: Option<(NodeId, f64)> = None;
    for n in tree.nodes() {
        if n.status != NodeStatus::Done {
            continue;
        }
        let np = n.parent.map_or(n.visits, |p| tree.get(p).unwrap().visits) as f64;
        let v = n.total_reward / n.visits as f64 + c * (np.ln() / n.visits as f64).sqrt();
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((n.id, v)),
        }
    }
    best.map(|(id, _)| id)
}

fn oracle_scores() -> Result<(usize, f64), String> {
    let text = std::fs::read_to_string(fixtures().join("uct_reference.csv")).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut count = 0;
    for (i, line) in text.lines().skip(1).enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        ensure!(cols.len() == 5, "reference row {i}: expected 5 columns");
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("reference row {i}: {e}"));
        let (q, n, np, c, expected) = (num(cols[0])?, num(cols[1])? as u64, num(cols[2])? as u64, num(cols[3])?, num(cols[4])?);
        let mut node = ExperimentNode::pending(NodeId(2), Some(NodeId(1)), None);
        node.visits = n;
        node.total_reward = q;
        let got = uct_score(&node, np, &UctParams::new(c).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let rel = if expected == 0.0 { got.abs() } else { ((got - expected) / expected).abs() };
        ensure!(rel <= 1e-12, "reference row {i}: got {got:e}, expected {expected:e} (rel err {rel:e})");
        worst = worst.max(rel);
        count += 1;
    }
    ensure!(count >= 1000, "only {count} reference rows");
    Ok((count, worst))
}

pub fn check() -> Outcome {
    let (rows, worst) = oracle_scores()?;
    let cs = [0.0, 0.5, std::f64::consts::SQRT_2, 3.0];
    let trees = 1200;
    for seed in 0..trees {
        let tree = random_tree(seed, 2 + (seed as usize * 7) % 60);
        let c = cs[seed as usize % cs.len()];
        let got = Mcts { params: UctParams::new(c).unwrap() }.select(&tree).map_err(|e| format!("tree {seed}: {e}"))?;
        let want = brute_force(&tree, c).ok_or(format!("tree {seed}: no Done node"))?;
        ensure!(got == want, "tree {seed} (c={c}): policy chose {got}, brute force {want}");
        for n in tree.nodes() {
            ensure!(uct_score(n, parent_visits(&tree, n), &UctParams::new(c).unwrap()).is_ok(), "tree {seed}: {} has undefined UCT", n.id);
        }
    }
    Ok(format!("{trees} random trees agree with brute force; {rows} reference scores, max rel err {worst:.1e}"))
}
