use arbor_core::metrics::parse_scores_csv;

use crate::{ensure, fixtures, Outcome};

pub fn check() -> Outcome {
    let text = std::fs::read_to_string(fixtures().join("gains/ft_bench_scores.csv")).map_err(|e| e.to_string())?;
    let rows = parse_scores_csv(&text).map_err(|e| e.to_string())?;
    ensure!(rows.len() == 20, "expected 20 rows, found {}", rows.len());
    let mut worst = 0.0f64;
    for r in &rows {
        let reported = r.reported_gain_pct.ok_or_else(|| format!("{}: no reported gain", r.task))?;
        let got = r.gain().map_err(|e| e.to_string())?.gain * 100.0;
        let err = (got - reported).abs();
        ensure!(err <= 1.0, "{} ({}): computed {got:.2}%, reported {reported}%", r.task, r.backend.as_deref().unwrap_or("-"));
        worst = worst.max(err);
    }
    let aci = rows.iter().find(|r| r.task == "ACI-Bench" && r.reported_gain_pct == Some(849.0)).ok_or("no ACI-Bench +849% row")?;
    let pct = aci.gain().map_err(|e| e.to_string())?.percent();
    ensure!(pct == "+849%", "ACI-Bench renders as {pct}");
    Ok(format!("20/20 within 1pp, max deviation {worst:.3}pp, ACI-Bench {pct}"))
}
