//! Report rendering: an aligned text table, CSV or JSON.

use std::fmt::Write as _;

use crate::error::{Error, ErrorCode, Result};

use super::ScenarioReport;

/// Published mean / max / min access latency (seconds) of the automated
/// and the manual workflow, for side-by-side display. These are not
/// produced by the run.
pub const PUBLISHED_AUTOMATED_S: (f64, f64, f64) = (11.47, 12.59, 9.67);
pub const PUBLISHED_MANUAL_S: (f64, f64, f64) = (60.58, 75.97, 51.60);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::new(ErrorCode::BadFormat, format!("unknown report format {other:?}"))),
        }
    }
}

pub fn render(report: &ScenarioReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).map_err(|e| Error::new(ErrorCode::Internal, e.to_string())),
        ReportFormat::Csv => Ok(csv(report)),
        ReportFormat::Table => Ok(table(report)),
    }
}

fn secs(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

fn csv(report: &ScenarioReport) -> String {
    let mut out = String::from("index,node,latency_s\n");
    for s in &report.samples {
        let _ = writeln!(out, "{},{},{:.3}", s.index, s.node, s.latency_ms as f64 / 1000.0);
    }
    out
}

fn table(report: &ScenarioReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<44} {:>7} {:>10} {:>10} {:>10}", "series", "count", "average_s", "maximum_s", "minimum_s");
    let st = &report.stats;
    if st.count > 0 {
        let _ = writeln!(
            out,
            "{:<44} {:>7} {:>10} {:>10} {:>10}",
            "measured",
            st.count,
            secs(st.average_s),
            secs(st.maximum_s),
            secs(st.minimum_s)
        );
        for (label, (avg, max, min)) in [
            ("published automated (not reproduced)", PUBLISHED_AUTOMATED_S),
            ("published manual (not reproduced)", PUBLISHED_MANUAL_S),
        ] {
            let _ = writeln!(out, "{label:<44} {:>7} {avg:>10.2} {max:>10.2} {min:>10.2}", "-");
        }
    }
    if report.commands.dispatched > 0 {
        let c = &report.commands;
        let _ = writeln!(
            out,
            "\ncommands: {} dispatched, {} succeeded, {} failed, {} timed out, {} open",
            c.dispatched, c.succeeded, c.failed, c.timed_out, c.open
        );
    }
    if report.transport_drops != (0, 0) {
        let _ = writeln!(out, "dropped: {} requests, {} responses", report.transport_drops.0, report.transport_drops.1);
    }
    if let Some(ms) = report.wall_clock_ms {
        let _ = writeln!(out, "wall clock: {ms} ms");
    }
    if !report.checks.is_empty() {
        out.push('\n');
        for c in &report.checks {
            let _ = writeln!(out, "{} {:<22} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        }
    }
    out
}
