//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines are always printed:
//!
//! ```text
//! cargo test -p arbor-core --test acceptance
//! ```
//!
//! Set `UPDATE_GOLDEN=1` to rewrite the golden run files instead of comparing
//! against them.

mod ablation;
mod aidp;
mod backprop;
mod gains;
mod golden;
mod memory;
mod separation;
mod trees;
mod uct;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

pub type Outcome = Result<String, String>;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Fails with a message built from the remaining arguments unless `cond`.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    check: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { name: "relative gains reproduce all 20 published percentages", limit: Duration::from_secs(1), check: gains::check },
        Criterion { name: "UCT selection and scores match the oracles", limit: Duration::from_secs(10), check: uct::check },
        Criterion { name: "backpropagation conserves visits and rewards", limit: Duration::from_secs(60), check: backprop::check },
        Criterion { name: "dataset operators are deterministic; dedup and top-k hold", limit: Duration::from_secs(60), check: aidp::check },
        Criterion { name: "memory context respects budget and priority", limit: Duration::from_secs(60), check: memory::check },
        Criterion { name: "golden 20-iteration run, kill and resume", limit: Duration::from_secs(60), check: golden::check },
        Criterion { name: "MCTS beats SES and GBFS on the deceptive landscape", limit: Duration::from_secs(300), check: separation::check },
        Criterion { name: "bad-case ablation removes only case sections", limit: Duration::from_secs(60), check: ablation::check },
    ];
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(c.check).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > c.limit => Err(format!("{detail}; took {elapsed:.2?}, limit {:?}", c.limit)),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS [{}] {} ({detail}; {elapsed:.2?})", i + 1, c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {} ({detail}; {elapsed:.2?})", i + 1, c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
