//! Line-oriented run records and human-readable summaries.
//!
//! Record files are one JSON object per line and carry no wall-clock
//! content, so identical configurations produce byte-identical files.
//! Times appear only in the rendered summary text.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::verifier::{Certificate, IterRecord, RowReport};

/// One solve within a row, as written to record files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterLine {
    pub iteration: usize,
    pub tau: f64,
    pub trace_gap: f64,
    pub directions: usize,
    pub cuts_added: usize,
    pub pool_size: usize,
    pub solver_iterations: usize,
}

impl From<&IterRecord> for IterLine {
    fn from(r: &IterRecord) -> Self {
        IterLine {
            iteration: r.iteration,
            tau: r.tau,
            trace_gap: r.trace_gap,
            directions: r.directions,
            cuts_added: r.cuts_added,
            pool_size: r.pool_size,
            solver_iterations: r.solver_iterations,
        }
    }
}

/// Everything recorded about one safe-set row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowRecord {
    pub row: usize,
    pub certified: bool,
    pub stop: String,
    pub attack_value: f64,
    pub final_tau: f64,
    pub final_trace_gap: f64,
    pub cuts: usize,
    pub iterations: Vec<IterLine>,
}

impl From<&RowReport> for RowRecord {
    fn from(r: &RowReport) -> Self {
        RowRecord {
            row: r.row_index,
            certified: r.certified,
            stop: r.stop.to_string(),
            attack_value: r.attack_value,
            final_tau: r.final_tau(),
            final_trace_gap: r.final_trace_gap(),
            cuts: r.pool.len(),
            iterations: r.iterations.iter().map(IterLine::from).collect(),
        }
    }
}

/// One (instance, mode) outcome in a benchmark run. `series` holds the
/// objective value per solve for every row, so progress plots need no
/// second pass over the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchRecord {
    pub instance: String,
    pub mode: String,
    pub certified: bool,
    pub rows: usize,
    pub mean_final_tau: f64,
    pub mean_trace_gap: f64,
    pub series: Vec<Vec<f64>>,
    pub error: Option<String>,
}

impl BenchRecord {
    /// Folds a finished certificate into a record.
    pub fn from_certificate(instance: &str, mode: &str, cert: &Certificate) -> Self {
        let n = cert.rows.len().max(1) as f64;
        BenchRecord {
            instance: instance.to_string(),
            mode: mode.to_string(),
            certified: cert.certified,
            rows: cert.rows.len(),
            mean_final_tau: cert.rows.iter().map(RowReport::final_tau).sum::<f64>() / n,
            mean_trace_gap: cert.rows.iter().map(RowReport::final_trace_gap).sum::<f64>() / n,
            series: cert.rows.iter().map(RowReport::tau_trace).collect(),
            error: None,
        }
    }

    /// Records an instance that could not be run under this mode.
    pub fn from_error(instance: &str, mode: &str, err: &Error) -> Self {
        BenchRecord {
            instance: instance.to_string(),
            mode: mode.to_string(),
            certified: false,
            rows: 0,
            mean_final_tau: f64::NAN,
            mean_trace_gap: f64::NAN,
            series: Vec::new(),
            error: Some(err.to_string()),
        }
    }
}

/// One record per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Inverse of [`to_jsonl`]; blank lines are skipped.
pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

/// Per-row lines plus a verdict, the only place a verify run prints time.
pub fn render_verify_summary(records: &[RowRecord], wall_seconds: f64) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(
            s,
            "row {:>3}  {}  stop {:<16} tau {:>12.5e}  gap {:>10.3e}  attack {:>12.5e}  solves {:>2}  cuts {:>3}",
            r.row,
            if r.certified { "certified" } else { "undecided" },
            r.stop,
            r.final_tau,
            r.final_trace_gap,
            r.attack_value,
            r.iterations.len(),
            r.cuts,
        );
    }
    let good = records.iter().filter(|r| r.certified).count();
    let verdict = if good == records.len() && !records.is_empty() {
        "CERTIFIED"
    } else {
        "UNDECIDED"
    };
    let _ = writeln!(
        s,
        "verdict: {verdict} ({good}/{} rows certified) in {wall_seconds:.2}s",
        records.len()
    );
    s
}

/// Aggregate of one mode across a benchmark suite.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSummary {
    pub mode: String,
    pub instances: usize,
    pub certified: usize,
    pub errors: usize,
    /// Means over instances that ran; NaN when none did.
    pub mean_trace_gap: f64,
    pub mean_final_tau: f64,
    pub mean_seconds: f64,
}

/// Collapses the records of one mode. `seconds` pairs with `records` by
/// index and covers wall time per instance.
pub fn summarize_mode(mode: &str, records: &[BenchRecord], seconds: &[f64]) -> ModeSummary {
    debug_assert_eq!(records.len(), seconds.len());
    let ran: Vec<&BenchRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let n = ran.len() as f64;
    let mean = |f: &dyn Fn(&BenchRecord) -> f64| -> f64 {
        if ran.is_empty() {
            f64::NAN
        } else {
            ran.iter().map(|r| f(r)).sum::<f64>() / n
        }
    };
    ModeSummary {
        mode: mode.to_string(),
        instances: records.len(),
        certified: records.iter().filter(|r| r.certified).count(),
        errors: records.len() - ran.len(),
        mean_trace_gap: mean(&|r| r.mean_trace_gap),
        mean_final_tau: mean(&|r| r.mean_final_tau),
        mean_seconds: if records.is_empty() {
            f64::NAN
        } else {
            seconds.iter().sum::<f64>() / records.len() as f64
        },
    }
}

/// Fixed-width comparison table, one line per mode.
pub fn render_benchmark_table(rows: &[ModeSummary]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>16} {:>8} {:>13} {:>13} {:>10}",
        "mode", "certified", "errors", "mean gap", "mean tau", "mean time"
    );
    for r in rows {
        let pct = if r.instances == 0 {
            0.0
        } else {
            100.0 * r.certified as f64 / r.instances as f64
        };
        let _ = writeln!(
            s,
            "{:<12} {:>5}/{:<4} {:>4.1}% {:>8} {:>13.4e} {:>13.4e} {:>9.2}s",
            r.mode, r.certified, r.instances, pct, r.errors, r.mean_trace_gap, r.mean_final_tau, r.mean_seconds
        );
    }
    s
}
