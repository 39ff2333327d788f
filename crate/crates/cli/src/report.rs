//! Report files and their side-by-side deltas.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use relbias_core::metrics::{GraphConstraint, MetricReport, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub tool: String,
    pub config_hash: String,
    pub dataset_hash: String,
    /// Which predictions were scored, e.g. `ensemble` or `sg`.
    pub predictions: String,
    pub inputs: BTreeMap<String, String>,
    pub settings: BTreeMap<String, serde_json::Value>,
    pub graph_constraint: GraphConstraint,
    pub metrics: MetricReport,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot read report {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid report {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("incompatible cutoffs: {a:?} vs {b:?}")]
    Cutoffs { a: Vec<usize>, b: Vec<usize> },
    #[error("incompatible splits: {a:?} vs {b:?}")]
    Splits { a: Vec<String>, b: Vec<String> },
}

pub fn read_report(path: &Path) -> Result<ReportFile, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ReportError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Signed percentage-point delta with one decimal; values that round to
/// zero print as `+0.0`.
pub fn format_delta(a: f64, b: f64) -> String {
    let d = (b - a) * 100.0;
    let s = format!("{d:+.1}");
    if s == "-0.0" {
        "+0.0".into()
    } else {
        s
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

fn rows(label: &str, r: &MetricReport) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (k, v) in &r.recall_at {
        out.push((format!("{label}R@{k}"), *v));
    }
    for (k, v) in &r.mrecall_at {
        out.push((format!("{label}mR@{k}"), *v));
    }
    out.push((format!("{label}Acc"), r.acc));
    out.push((format!("{label}mAcc"), r.macc));
    out
}

fn split_names(r: &MetricReport) -> Vec<String> {
    r.splits.keys().map(Split::to_string).collect()
}

/// Tab-separated table of `metric, a, b, delta` with values in percent.
/// Splits that are empty in either report list their metrics as `-`.
pub fn diff_reports(a: &MetricReport, b: &MetricReport) -> Result<String, ReportError> {
    let cutoffs = |r: &MetricReport| r.recall_at.keys().copied().collect::<Vec<_>>();
    if cutoffs(a) != cutoffs(b) {
        return Err(ReportError::Cutoffs {
            a: cutoffs(a),
            b: cutoffs(b),
        });
    }
    if split_names(a) != split_names(b) {
        return Err(ReportError::Splits {
            a: split_names(a),
            b: split_names(b),
        });
    }
    let mut out = String::from("metric\ta\tb\tdelta\n");
    let emit = |out: &mut String, ra: &MetricReport, rb: &MetricReport, label: &str| {
        for ((name, x), (_, y)) in rows(label, ra).into_iter().zip(rows(label, rb)) {
            let _ = writeln!(
                out,
                "{name}\t{}\t{}\t{}",
                pct(x),
                pct(y),
                format_delta(x, y)
            );
        }
    };
    emit(&mut out, a, b, "");
    for (split, ea) in &a.splits {
        let eb = &b.splits[split];
        let label = format!("{split}/");
        match (&ea.report, &eb.report) {
            (Some(ra), Some(rb)) => emit(&mut out, ra, rb, &label),
            _ => {
                let _ = writeln!(out, "{label}count\t{}\t{}\t-", ea.count, eb.count);
            }
        }
    }
    Ok(out)
}
