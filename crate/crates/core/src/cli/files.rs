//! On-disk formats: the flat evaluation history, the run summary, and
//! power-curve tables. Files are written to a temporary sibling and
//! renamed into place; floating-point values carry 17 significant digits
//! so a reload is bit-exact.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::design_space::{DesignPoint, Strategy};
use crate::error::{Error, Result};
use crate::optimizer::EvaluationRecord;

/// One evaluation, as stored in the history file.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub scenario: String,
    pub method: String,
    /// Outer repetition for BO methods, inner stochastic replicate for
    /// grid methods.
    pub replication: usize,
    pub iteration: usize,
    pub strategy: Strategy,
    pub r: f64,
    pub eps: Option<f64>,
    pub tau: Option<f64>,
    pub n1: usize,
    pub n2: usize,
    pub k2_hat: f64,
    pub y: f64,
    pub seed: u64,
    pub millis: f64,
}

impl HistoryRow {
    pub fn from_record(
        scenario: &str,
        method: &str,
        replication: usize,
        record: &EvaluationRecord,
    ) -> HistoryRow {
        HistoryRow {
            scenario: scenario.to_string(),
            method: method.to_string(),
            replication,
            iteration: record.iteration,
            strategy: record.point.strategy,
            r: record.point.r,
            eps: record.point.eps,
            tau: record.point.tau,
            n1: record.n_stage1,
            n2: record.n_stage2,
            k2_hat: record.k2_hat,
            y: record.y.value,
            seed: record.seed,
            millis: record.millis,
        }
    }

    pub fn point(&self) -> DesignPoint {
        DesignPoint {
            strategy: self.strategy,
            r: self.r,
            eps: self.eps,
            tau: self.tau,
        }
    }
}

pub const HISTORY_HEADER: &str =
    "scenario,method,replication,iteration,strategy,r,eps,tau,n1,n2,k2_hat,y,seed,millis";

/// 17 significant digits; enough to reproduce any f64 exactly.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Writes the evaluation history; timestamps live in their own column so
/// the remaining columns reproduce byte-for-byte under a fixed seed.
pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut text = String::with_capacity(rows.len() * 128 + 128);
    text.push_str(HISTORY_HEADER);
    text.push('\n');
    for row in rows {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.scenario,
            row.method,
            row.replication,
            row.iteration,
            row.strategy.label(),
            fmt_f64(row.r),
            fmt_opt(row.eps),
            fmt_opt(row.tau),
            row.n1,
            row.n2,
            fmt_f64(row.k2_hat),
            fmt_f64(row.y),
            row.seed,
            fmt_f64(row.millis),
        )
        .expect("writing to string cannot fail");
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config(format!("{}: empty history", path.display())))?;
    if header != HISTORY_HEADER {
        return Err(Error::Config(format!(
            "{}: unexpected history header",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 14 {
            return Err(Error::Config(format!(
                "{}:{}: expected 14 fields, got {}",
                path.display(),
                lineno + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 2)))
        };
        let parse_u = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 2)))
        };
        let opt_f = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse_f(s).map(Some)
            }
        };
        rows.push(HistoryRow {
            scenario: fields[0].to_string(),
            method: fields[1].to_string(),
            replication: parse_u(fields[2])?,
            iteration: parse_u(fields[3])?,
            strategy: Strategy::parse(fields[4]).ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: unknown strategy '{}'",
                    path.display(),
                    lineno + 2,
                    fields[4]
                ))
            })?,
            r: parse_f(fields[5])?,
            eps: opt_f(fields[6])?,
            tau: opt_f(fields[7])?,
            n1: parse_u(fields[8])?,
            n2: parse_u(fields[9])?,
            k2_hat: parse_f(fields[10])?,
            y: parse_f(fields[11])?,
            seed: fields[12]
                .parse()
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 2)))?,
            millis: parse_f(fields[13])?,
        });
    }
    Ok(rows)
}

/// One point of a power curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub scenario: String,
    pub method: String,
    pub strategy: Strategy,
    /// The eps or tau value of the displayed slice, when the strategy has
    /// a parameter.
    pub param: Option<f64>,
    pub r: f64,
    pub mean_power: f64,
    /// Standard error of the mean over the replicates at this point.
    pub se: f64,
    pub replicates: usize,
}

pub fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut text = String::new();
    text.push_str("scenario,method,strategy,param,r,mean_power,se,replicates\n");
    for row in rows {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{}",
            row.scenario,
            row.method,
            row.strategy.label(),
            fmt_opt(row.param),
            fmt_f64(row.r),
            fmt_f64(row.mean_power),
            fmt_f64(row.se),
            row.replicates,
        )
        .expect("writing to string cannot fail");
    }
    write_atomic(path, text.as_bytes())
}

/// Serializes any summary-like document as pretty JSON.
pub fn write_summary<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("summary serialization failed: {e}")))?;
    write_atomic(path, json.as_bytes())
}

/// Temp-then-rename so readers never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp: PathBuf = {
        let mut name = path.as_os_str().to_owned();
        name.push(format!(".tmp-{}", std::process::id()));
        PathBuf::from(name)
    };
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
