//! Report files and table rendering.
//!
//! Reports are JSON (the canonical form); the aligned text tables are
//! derived from them, never the reverse, so re-rendering a stored report
//! reproduces the table exactly. Percentages render with one decimal
//! digit, half-up.

use std::path::Path;

use thiserror::Error;

use crate::pipeline::ABLATION_LABELS;
use crate::types::{Aggregates, RunReport};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("expected {expected} reports, found {found}")]
    WrongArity { expected: usize, found: usize },
}

/// `pass / denom` as a percentage string with one half-up decimal, e.g.
/// `format_pct(424, 500)` is `"84.8%"`. Integer arithmetic, so ties round
/// up exactly.
pub fn format_pct(pass: u64, denom: u64) -> String {
    if denom == 0 {
        return "n/a".to_string();
    }
    let tenths = (pass * 2000 + denom) / (2 * denom);
    format!("{}.{}%", tenths / 10, tenths % 10)
}

/// Method-A cell for a report's aggregates ("n/a" when undefined).
pub fn method_a_cell(agg: &Aggregates) -> String {
    format_pct(agg.pass_a as u64, (agg.pass_a + agg.fail_a) as u64)
}

/// Method-B cell for a report's aggregates ("n/a" when undefined).
pub fn method_b_cell(agg: &Aggregates) -> String {
    format_pct(agg.pass_b as u64, (agg.pass_b + agg.fail_b) as u64)
}

fn render_rows(rows: &[(String, String, String)]) -> String {
    let headers = ("Configuration", "Method A", "Method B");
    let label_w = rows
        .iter()
        .map(|(l, _, _)| l.chars().count())
        .chain([headers.0.len()])
        .max()
        .unwrap_or(0);
    let mut out = format!(
        "{:<label_w$}  {:>8}  {:>8}\n",
        headers.0, headers.1, headers.2
    );
    for (label, a, b) in rows {
        out.push_str(&format!("{label:<label_w$}  {a:>8}  {b:>8}\n"));
    }
    out
}

/// One-row table for a single run, plus a count summary line.
pub fn render_run_table(report: &RunReport) -> String {
    let agg = &report.aggregates;
    let mut out = render_rows(&[(
        "run".to_string(),
        method_a_cell(agg),
        method_b_cell(agg),
    )]);
    out.push_str(&format!(
        "n={} invalid_a={} invalid_b={}\n",
        agg.total, agg.invalid_a, agg.invalid_b
    ));
    out
}

/// Five-row ablation table in matrix order: PICOs, w/o classification,
/// w/o expansion, w/o PICO, w/ PIO.
pub fn render_ablation_table(reports: &[RunReport]) -> Result<String, ReportError> {
    if reports.len() != ABLATION_LABELS.len() {
        return Err(ReportError::WrongArity {
            expected: ABLATION_LABELS.len(),
            found: reports.len(),
        });
    }
    let rows: Vec<(String, String, String)> = ABLATION_LABELS
        .iter()
        .zip(reports)
        .map(|(label, r)| {
            (
                label.to_string(),
                method_a_cell(&r.aggregates),
                method_b_cell(&r.aggregates),
            )
        })
        .collect();
    Ok(render_rows(&rows))
}

/// A stored report file: one run or an ablation matrix.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
#[serde(untagged)]
pub enum StoredReport {
    Matrix(Vec<RunReport>),
    Single(Box<RunReport>),
}

impl StoredReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Renders the same table text the producing command printed.
    pub fn render(&self) -> Result<String, ReportError> {
        match self {
            StoredReport::Single(r) => Ok(render_run_table(r)),
            StoredReport::Matrix(rs) => render_ablation_table(rs),
        }
    }
}

pub fn write_report(path: &Path, report: &StoredReport) -> Result<(), ReportError> {
    std::fs::write(path, report.to_json()).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_report(path: &Path) -> Result<StoredReport, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ReportError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
