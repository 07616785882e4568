use std::collections::BTreeMap;
use std::path::Path;

use arbor_core::diagnostics::{report_sections, CASES_HEADER, CATEGORIES_HEADER, CONFIGS_HEADER, METRICS_HEADER};
use arbor_core::runtime::Engine;

use crate::golden::example_config;
use crate::{ensure, Outcome};

/// `<node>.txt` report texts by node id.
fn reports(ws: &Path) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(ws.join("reports")).map_err(|e| e.to_string())? {
        let p = e.map_err(|e| e.to_string())?.path();
        if p.extension().is_some_and(|x| x == "txt") {
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            out.insert(name, std::fs::read_to_string(&p).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

fn contexts(ws: &Path) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(ws.join("contexts")).map_err(|e| e.to_string())? {
        out.push(std::fs::read_to_string(e.map_err(|e| e.to_string())?.path()).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn run(ws: &Path, bad_cases: bool) -> Result<(), String> {
    let mut config = example_config(ws)?;
    config.bad_case_analysis = bad_cases;
    Engine::new(config).and_then(|mut e| e.run()).map(|_| ()).map_err(|e| e.to_string())
}

pub fn check() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (on, off) = (dir.path().join("on"), dir.path().join("off"));
    run(&on, true)?;
    run(&off, false)?;
    let (ron, roff) = (reports(&on)?, reports(&off)?);
    ensure!(!ron.is_empty() && ron.len() == roff.len(), "report counts differ: {} vs {}", ron.len(), roff.len());

    let with_cases = ron.values().filter(|t| report_sections(t).get(CASES_HEADER).is_some_and(|b| !b.trim().is_empty())).count();
    ensure!(with_cases > 0, "no report lists bad cases even with analysis on; the ablation shows nothing");
    let ctx_on = contexts(&on)?.iter().filter(|c| c.contains("bad cases:")).count();
    ensure!(ctx_on > 0, "no context mentions bad cases with analysis on");

    for (node, text) in &roff {
        let sections = report_sections(text);
        ensure!(!sections.contains_key(CASES_HEADER) && !sections.contains_key(CATEGORIES_HEADER), "node {node}: case sections present with analysis off");
        let with = report_sections(&ron[node]);
        for h in [METRICS_HEADER, CONFIGS_HEADER] {
            ensure!(sections.get(h) == with.get(h), "node {node}: {h} differs between ablation arms");
        }
    }
    ensure!(contexts(&off)?.iter().all(|c| !c.contains("bad cases")), "a context mentions bad cases with analysis off");
    let csv = |ws: &Path| std::fs::read_to_string(ws.join("plots/trajectory.csv")).map_err(|e| e.to_string());
    ensure!(csv(&on)? == csv(&off)?, "trajectory differs between ablation arms");
    Ok(format!(
        "{} reports per arm; {with_cases} with case sections and {ctx_on} contexts citing them when on, none when off; metric tables identical",
        ron.len()
    ))
}
