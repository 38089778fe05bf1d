//! Side-by-side table of final filtered metrics across run logs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use lemon_kge::trainer::{LogRecord, TrainLog};

struct Row {
    name: String,
    setup: String,
    mrr: f64,
    hits1: f64,
    hits3: f64,
    hits10: f64,
}

/// Signed difference in percentage points, `+` or `-` prefixed.
pub fn delta(value: f64, reference: f64) -> String {
    let d = 100.0 * (value - reference);
    if d < -0.005 {
        format!("-{:.2}", -d)
    } else {
        format!("+{:.2}", d.abs())
    }
}

fn row(path: &Path, log: &TrainLog) -> anyhow::Result<Row> {
    let metrics = log
        .final_metrics()
        .ok_or_else(|| anyhow!("{}: no final metrics (run incomplete?)", path.display()))?;
    let (name, setup) = log
        .records
        .iter()
        .find_map(|r| match r {
            LogRecord::Run {
                run_name,
                model,
                strategy,
                loss_mode,
                ..
            } => Some((
                run_name.clone(),
                format!("{model}/{strategy}/{}", loss_label(*loss_mode)),
            )),
            _ => None,
        })
        .unwrap_or_else(|| (path.display().to_string(), "?".into()));
    let f = metrics.filtered;
    Ok(Row {
        name,
        setup,
        mrr: f.mrr,
        hits1: f.hits1,
        hits3: f.hits3,
        hits10: f.hits10,
    })
}

fn loss_label(mode: lemon_kge::LossMode) -> &'static str {
    match mode {
        lemon_kge::LossMode::Plain => "plain",
        lemon_kge::LossMode::SelfAdversarial => "self-adv",
    }
}

/// Renders the comparison; the first log is the reference for both delta columns.
pub fn render(logs: &[(PathBuf, TrainLog)]) -> anyhow::Result<String> {
    let rows = logs
        .iter()
        .map(|(p, l)| row(p, l))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let Some(reference) = rows.first() else {
        return Ok(String::new());
    };
    let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(3);
    let setup_w = rows.iter().map(|r| r.setup.len()).max().unwrap_or(0).max(5);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<name_w$}  {:<setup_w$}  {:>7}  {:>6}  {:>6}  {:>6}  {:>8}  {:>8}",
        "Run", "Setup", "MRR", "H@1", "H@3", "H@10", "dMRR", "dH@10"
    );
    for (i, r) in rows.iter().enumerate() {
        let (dm, dh) = if i == 0 {
            ("ref".to_owned(), "ref".to_owned())
        } else {
            (delta(r.mrr, reference.mrr), delta(r.hits10, reference.hits10))
        };
        let _ = writeln!(
            out,
            "{:<name_w$}  {:<setup_w$}  {:>7.4}  {:>6.2}  {:>6.2}  {:>6.2}  {:>8}  {:>8}",
            r.name,
            r.setup,
            r.mrr,
            100.0 * r.hits1,
            100.0 * r.hits3,
            100.0 * r.hits10,
            dm,
            dh
        );
    }
    Ok(out)
}
