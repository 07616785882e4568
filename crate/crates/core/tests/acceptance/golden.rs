use std::path::{Path, PathBuf};

use arbor_core::runtime::{Engine, RunConfig, RuntimeError};

use crate::{ensure, fixtures, Outcome};

pub const GOLDEN_FILES: [(&str, &str); 3] =
    [("plots/trajectory.csv", "trajectory.csv"), ("best_node.json", "best_node.json"), ("plots/tree.txt", "tree.txt")];

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// The shipped example run, writing into `workspace`.
pub fn example_config(workspace: &Path) -> Result<RunConfig, String> {
    let mut c = RunConfig::load(&fixtures().join("example/run.toml")).map_err(|e| e.to_string())?;
    c.workspace = workspace.to_path_buf();
    Ok(c)
}

fn read(p: &Path) -> Result<String, String> {
    std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn compare(ws: &Path, what: &str) -> Result<(), String> {
    for (produced, golden) in GOLDEN_FILES {
        let got = read(&ws.join(produced))?;
        let want = read(&golden_dir().join(golden))?;
        ensure!(got == want, "{what}: {produced} differs from golden {golden}");
    }
    Ok(())
}

pub fn check() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ws = dir.path().join("straight");
    let summary = Engine::new(example_config(&ws)?).and_then(|mut e| e.run()).map_err(|e| e.to_string())?;
    ensure!(summary.iterations == 20, "ran {} iterations", summary.iterations);
    let frontier: Vec<f64> = summary.frontier.iter().map(|f| f.ok_or("iteration without a frontier value")).collect::<Result<_, _>>()?;
    ensure!(frontier.windows(2).all(|w| w[0] <= w[1]), "frontier not monotone: {frontier:?}");

    let updating = std::env::var_os("UPDATE_GOLDEN").is_some();
    if updating {
        std::fs::create_dir_all(golden_dir()).map_err(|e| e.to_string())?;
        for (produced, golden) in GOLDEN_FILES {
            std::fs::copy(ws.join(produced), golden_dir().join(golden)).map_err(|e| e.to_string())?;
        }
    }
    compare(&ws, "straight run")?;

    for k in [1usize, 7, 13] {
        let ws_k = dir.path().join(format!("killed-{k}"));
        let config = example_config(&ws_k)?;
        match Engine::new(config.clone()).and_then(|e| e.stop_after_iterations(k).run()) {
            Err(RuntimeError::Interrupted { .. }) => {}
            Ok(_) => return Err(format!("run meant to stop after iteration {k} finished")),
            Err(e) => return Err(format!("kill at {k}: {e}")),
        }
        ensure!(!ws_k.join("plots/trajectory.csv").exists(), "kill at {k}: outputs written before the run finished");
        Engine::new(config).and_then(|mut e| e.resume()).map_err(|e| format!("resume after {k}: {e}"))?;
        compare(&ws_k, &format!("resume after iteration {k}"))?;
    }
    let best = summary.best.as_ref().map_or(f64::NAN, |b| b.score);
    Ok(format!(
        "{}; best {best:.4}, goldens match; resumes after iterations 1, 7, 13 identical",
        if updating { "goldens rewritten" } else { "20 iterations" }
    ))
}
