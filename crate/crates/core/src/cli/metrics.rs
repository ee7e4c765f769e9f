//! Run outputs: per-round metrics, a final summary, and wall-clock timings.
//!
//! `metrics.csv` starts with `# schema: mrff-metrics/1` followed by the
//! header `round,split,auc,logloss,balance_loss,block,group_share_0,...`.
//! Each round contributes one row per block for `val` and one for `test`
//! when it was evaluated, and one row per block with split `none`
//! otherwise. Missing metrics are empty fields. Timings live in a separate
//! file so the metrics of two identical runs are byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federated::{RoundReport, SplitMetrics};
use crate::model::ModelConfig;

pub const METRICS_SCHEMA: &str = "mrff-metrics/1";
pub const SUMMARY_SCHEMA: &str = "mrff-summary/1";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub split: String,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub balance_loss: f64,
    pub block: usize,
    pub group_shares: Vec<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn metrics_rows(reports: &[RoundReport]) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for r in reports {
        let splits: Vec<(&str, Option<&SplitMetrics>)> = match (&r.val, &r.test) {
            (None, None) => vec![("none", None)],
            (v, t) => vec![("val", v.as_ref()), ("test", t.as_ref())],
        };
        for (split, m) in splits {
            for (block, shares) in r.group_shares.iter().enumerate() {
                rows.push(MetricsRow {
                    round: r.round,
                    split: split.to_owned(),
                    auc: m.and_then(|m| m.auc),
                    logloss: m.and_then(|m| m.logloss),
                    balance_loss: r.balance_loss,
                    block,
                    group_shares: shares.clone(),
                });
            }
        }
    }
    rows
}

pub fn render_metrics(rows: &[MetricsRow], n_groups: usize) -> String {
    let mut out = format!("# schema: {METRICS_SCHEMA}\nround,split,auc,logloss,balance_loss,block");
    for i in 0..n_groups {
        write!(out, ",group_share_{i}").unwrap();
    }
    out.push('\n');
    for r in rows {
        write!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            r.split,
            opt(r.auc),
            opt(r.logloss),
            r.balance_loss,
            r.block
        )
        .unwrap();
        for s in &r.group_shares {
            write!(out, ",{s}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics(path: &Path, reports: &[RoundReport], n_groups: usize) -> Result<()> {
    std::fs::write(path, render_metrics(&metrics_rows(reports), n_groups))?;
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64, path: &Path) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse().map_err(|_| Error::Load {
        path: path.to_owned(),
        line,
        message: format!("cannot parse field {i} value {raw:?}"),
    })
}

/// Parses a metrics file written by [`write_metrics`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    if first != format!("# schema: {METRICS_SCHEMA}") {
        return Err(Error::Load {
            path: path.to_owned(),
            line: 1,
            message: format!("expected schema line for {METRICS_SCHEMA}"),
        });
    }
    let mut reader = csv::Reader::from_reader(rest.as_bytes());
    let header = reader.headers()?.clone();
    let fixed = ["round", "split", "auc", "logloss", "balance_loss", "block"];
    if header.iter().take(6).ne(fixed) {
        return Err(Error::Load {
            path: path.to_owned(),
            line: 2,
            message: format!("unexpected header {header:?}"),
        });
    }
    let n_groups = header.len() - fixed.len();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 3;
        let maybe = |j: usize| -> Result<Option<f64>> {
            match rec.get(j) {
                Some("") | None => Ok(None),
                Some(_) => field(&rec, j, line, path).map(Some),
            }
        };
        rows.push(MetricsRow {
            round: field(&rec, 0, line, path)?,
            split: rec.get(1).unwrap_or("").to_owned(),
            auc: maybe(2)?,
            logloss: maybe(3)?,
            balance_loss: field(&rec, 4, line, path)?,
            block: field(&rec, 5, line, path)?,
            group_shares: (0..n_groups)
                .map(|k| field(&rec, 6 + k, line, path))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// Final numbers of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub seed: u64,
    pub rounds: usize,
    pub model: ModelConfig,
    pub parameters: usize,
    pub noise: Option<f64>,
    pub alpha: f64,
    pub final_val: Option<SplitMetrics>,
    pub final_test: Option<SplitMetrics>,
    pub best_val_auc: Option<(usize, f64)>,
    pub final_group_shares: Vec<Vec<f64>>,
}

impl Summary {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s: Summary = serde_json::from_slice(&std::fs::read(path)?)?;
        if s.schema != SUMMARY_SCHEMA {
            return Err(Error::Load {
                path: path.to_owned(),
                line: 1,
                message: format!("expected schema {SUMMARY_SCHEMA}, got {}", s.schema),
            });
        }
        Ok(s)
    }
}

pub fn write_timings(path: &Path, reports: &[RoundReport]) -> Result<()> {
    let mut out = String::from("round,wall_seconds\n");
    for r in reports {
        writeln!(out, "{},{}", r.round, r.wall_seconds).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(round: usize, evaluated: bool) -> RoundReport {
        let m = SplitMetrics {
            auc: Some(0.1 + 0.2),
            logloss: None,
            n: 4,
        };
        RoundReport {
            round,
            val: evaluated.then(|| m.clone()),
            test: evaluated.then_some(m),
            train_loss: None,
            balance_loss: 1.0 / 3.0,
            group_shares: vec![vec![0.25, 0.75], vec![1.0, 0.0]],
            participants: 2,
            skipped: vec![],
            warning: None,
            noise: 0.0,
            privacy_violations: 0,
            wall_seconds: 0.5,
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let reports = vec![report(0, true), report(1, false), report(2, true)];
        write_metrics(&path, &reports, 2).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back, metrics_rows(&reports));
        assert_eq!(back.len(), 2 * 2 + 2 + 2 * 2);
        assert_eq!(back[0].auc, Some(0.1 + 0.2));
        assert_eq!(back[4].split, "none");
    }

    #[test]
    fn header_layout() {
        let text = render_metrics(&metrics_rows(&[report(0, true)]), 2);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# schema: mrff-metrics/1"));
        assert_eq!(
            lines.next(),
            Some("round,split,auc,logloss,balance_loss,block,group_share_0,group_share_1")
        );
    }

    #[test]
    fn wrong_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "round,split\n").unwrap();
        assert!(matches!(read_metrics(&path), Err(Error::Load { line: 1, .. })));
    }
}
