//! Plain-text result tables from manifest rows.

use std::fmt::Write;

use crate::metrics::format_pct;
use crate::orchestrator::{Manifest, ManifestRow, RowStatus};
use crate::error::Result;

pub const NO_EXPERIMENTS: &str = "no experiments";

const HEADERS: [&str; 8] = [
    "label", "flags", "model", "MPE%", "RMSE%", "EGYE%", "failures", "cost",
];

fn cells(row: &ManifestRow) -> [String; 8] {
    let metric = |f: fn(&crate::metrics::MetricMeans) -> f64| match (&row.status, &row.metrics) {
        (RowStatus::Completed, Some(m)) => format_pct(f(m)),
        (RowStatus::Failed, _) => "failed".to_string(),
        _ => "-".to_string(),
    };
    [
        row.label.clone(),
        row.scenario.flags(),
        row.model.clone(),
        metric(|m| m.mpe),
        metric(|m| m.rmse_norm),
        metric(|m| m.egye),
        row.failed_samples.to_string(),
        row.cost.map_or_else(|| "-".to_string(), |c| format!("${c:.2}")),
    ]
}

/// One table per experiment, in the order experiments first appear.
pub fn render(rows: &[ManifestRow]) -> String {
    if rows.is_empty() {
        return format!("{NO_EXPERIMENTS}\n");
    }
    let mut experiments: Vec<&str> = Vec::new();
    for r in rows {
        if !experiments.contains(&r.experiment.as_str()) {
            experiments.push(&r.experiment);
        }
    }
    let mut out = String::new();
    for (i, exp) in experiments.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let group: Vec<&ManifestRow> = rows.iter().filter(|r| r.experiment == *exp).collect();
        let table: Vec<[String; 8]> = group.iter().map(|r| cells(r)).collect();
        let mut widths = HEADERS.map(str::len);
        for t in &table {
            for (w, c) in widths.iter_mut().zip(t) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cols: &[String]| {
            let mut s = String::new();
            for (j, (c, w)) in cols.iter().zip(widths).enumerate() {
                if j > 0 {
                    s.push_str("  ");
                }
                // text columns left, numbers right
                if j < 3 {
                    let _ = write!(s, "{c:<w$}");
                } else {
                    let _ = write!(s, "{c:>w$}");
                }
            }
            s.trim_end().to_string()
        };
        let _ = writeln!(out, "experiment: {exp}");
        let _ = writeln!(out, "{}", line(&HEADERS.map(String::from)));
        let _ = writeln!(out, "{}", line(&widths.map(|w| "-".repeat(w))));
        for t in &table {
            let _ = writeln!(out, "{}", line(t));
        }
        for r in group.iter().filter(|r| r.status == RowStatus::Failed) {
            let _ = writeln!(out, "  {}: {}", r.label, r.error.as_deref().unwrap_or("failed"));
        }
    }
    out
}

pub fn render_manifest(manifest: &Manifest) -> Result<String> {
    Ok(render(&manifest.rows()?))
}
