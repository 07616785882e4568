use arbor_core::runtime::{Components, Engine, RunConfig};
use arbor_core::TaskDefinition;

use crate::{ensure, fixtures, Outcome};

const SEEDS: u64 = 100;
const ITERATIONS: usize = 20;

/// Best score after the last iteration for each seed, in memory.
fn frontier_at_end(policy: &str, task: &TaskDefinition) -> Result<Vec<f64>, String> {
    let components = Components::with_builtins();
    (0..SEEDS)
        .map(|seed| {
            let mut config = RunConfig::simulated("unused", "unused", seed);
            config.policy = policy.into();
            config.budgets.iterations = Some(ITERATIONS);
            let s = Engine::with_components(config, task.clone(), &components)
                .map_err(|e| e.to_string())?
                .in_memory()
                .run()
                .map_err(|e| format!("{policy} seed {seed}: {e}"))?;
            ensure!(s.iterations == ITERATIONS, "{policy} seed {seed}: {} iterations", s.iterations);
            Ok(s.frontier.last().copied().flatten().unwrap_or(0.0))
        })
        .collect()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// P(a > b) - P(a < b) over all pairs.
fn cliffs_delta(a: &[f64], b: &[f64]) -> f64 {
    let mut d = 0i64;
    for x in a {
        for y in b {
            d += (x > y) as i64 - (x < y) as i64;
        }
    }
    d as f64 / (a.len() * b.len()) as f64
}

pub fn check() -> Outcome {
    let task = TaskDefinition::load(&fixtures().join("example/task.toml")).map_err(|e| e.to_string())?;
    let results: Vec<Result<Vec<f64>, String>> = std::thread::scope(|s| {
        let handles: Vec<_> = ["mcts", "ses", "gbfs"].iter().map(|p| s.spawn(|| frontier_at_end(p, &task))).collect();
        handles.into_iter().map(|h| h.join().unwrap_or_else(|_| Err("worker panicked".into()))).collect()
    });
    let mut it = results.into_iter();
    let (mcts, ses, gbfs) = (it.next().unwrap()?, it.next().unwrap()?, it.next().unwrap()?);
    let (m, s, g) = (median(&mcts), median(&ses), median(&gbfs));
    let global = |v: &[f64]| v.iter().filter(|x| **x > 0.8).count();
    let detail = format!(
        "medians mcts {m:.4} ses {s:.4} gbfs {g:.4}; vs ses diff {:+.4} Cliff's delta {:+.3}; vs gbfs diff {:+.4} Cliff's delta {:+.3}; runs above 0.8: mcts {} ses {} gbfs {}",
        m - s,
        cliffs_delta(&mcts, &ses),
        m - g,
        cliffs_delta(&mcts, &gbfs),
        global(&mcts),
        global(&ses),
        global(&gbfs)
    );
    ensure!(m >= s && m >= g, "{detail}");
    Ok(detail)
}
