use arbor_core::memory::{collect_components, memory_context, CriticalThresholds, MemoryContext, MemoryError, NodeSummary};
use arbor_core::{ExperimentTree, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::trees::random_tree;
use crate::{ensure, Outcome};

fn summaries(tree: &ExperimentTree, ids: &[NodeId]) -> Vec<NodeSummary> {
    ids.iter().map(|id| NodeSummary::of(tree, tree.get(*id).unwrap())).collect()
}

fn ids(s: &[NodeSummary]) -> Vec<NodeId> {
    s.iter().map(|x| x.node_id).collect()
}

fn with(ctx: &MemoryContext, f: impl FnOnce(&mut MemoryContext)) -> MemoryContext {
    let mut c = ctx.clone();
    f(&mut c);
    c
}

/// Checks one condensed context against the full components.
fn check_context(ctx: &MemoryContext, path: &[NodeSummary], critical: &[NodeSummary], siblings: &[NodeSummary], budget: usize) -> Result<(), String> {
    ensure!(ctx.rendered_len() <= budget, "rendered {} chars over budget {budget}", ctx.rendered_len());
    let (kp, kc, ks) = (ids(&ctx.path_section), ids(&ctx.critical_section), ids(&ctx.sibling_section));
    let (fp, fc, fs) = (ids(path), ids(critical), ids(siblings));
    ensure!(fc.starts_with(&kc), "critical entries kept out of rank order");
    ensure!(fs.starts_with(&ks), "siblings kept out of order");
    ensure!(kp.first() == fp.first() && kp.last() == fp.last(), "path endpoints dropped");
    let dropped_path = fp.len() - kp.len();
    ensure!(kp[1..] == fp[1 + dropped_path..], "path interior not dropped oldest first");
    // Lower-priority sections go first.
    if kc.len() < fc.len() {
        ensure!(ks.is_empty(), "critical entries dropped while siblings remain");
    }
    if dropped_path > 0 {
        ensure!(kc.is_empty() && ks.is_empty(), "path entries dropped while other sections remain");
    }
    // Nothing was dropped needlessly: restoring the last dropped item overflows.
    let restored = if dropped_path > 0 {
        Some(with(ctx, |c| c.path_section.insert(1, path[dropped_path].clone())))
    } else if kc.len() < fc.len() {
        Some(with(ctx, |c| c.critical_section.push(critical[kc.len()].clone())))
    } else if ks.len() < fs.len() {
        Some(with(ctx, |c| c.sibling_section.push(siblings[ks.len()].clone())))
    } else {
        None
    };
    if let Some(r) = restored {
        ensure!(r.rendered_len() > budget, "an item was dropped although {} chars fit in {budget}", r.rendered_len());
    }
    Ok(())
}

pub fn check() -> Outcome {
    let thresholds = CriticalThresholds::default();
    let (mut contexts, mut truncated, mut too_small) = (0, 0, 0);
    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = random_tree(10_000 + seed, rng.gen_range(1..80));
        for _ in 0..4 {
            let v = NodeId(rng.gen_range(1..=tree.len() as u64));
            let budget = match rng.gen_range(0..3) {
                0 => rng.gen_range(300..1_000),
                1 => rng.gen_range(1_000..6_000),
                _ => rng.gen_range(6_000..40_000),
            };
            let comp = collect_components(&tree, v, &thresholds).map_err(|e| e.to_string())?;
            let (path, critical, siblings) = (summaries(&tree, &comp.path), summaries(&tree, &comp.critical), summaries(&tree, &comp.siblings));
            match memory_context(&tree, v, &thresholds, budget) {
                Ok(ctx) => {
                    check_context(&ctx, &path, &critical, &siblings, budget).map_err(|e| format!("tree {seed}, node {v}, budget {budget}: {e}"))?;
                    contexts += 1;
                    if ctx.path_section.len() + ctx.critical_section.len() + ctx.sibling_section.len() < path.len() + critical.len() + siblings.len() {
                        truncated += 1;
                    }
                }
                Err(MemoryError::BudgetTooSmall { needed, budget: b }) => {
                    ensure!(needed > b, "tree {seed}: BudgetTooSmall although {needed} <= {b}");
                    too_small += 1;
                }
                Err(e) => return Err(format!("tree {seed}, node {v}: {e}")),
            }
        }
    }
    ensure!(truncated > 100, "only {truncated} contexts needed condensing; the check is too weak");
    Ok(format!("500 trees, {contexts} contexts ({truncated} condensed), {too_small} budgets below the minimal context rejected"))
}
