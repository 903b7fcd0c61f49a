//! Summary metrics and the `records.csv` format.
//!
//! Metrics are a pure function of the rows as written (reals rounded to nine
//! significant digits), so they can be recomputed from the CSV alone.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Convergence, IterationRecord};

pub const RECORD_COLUMNS: [&str; 10] = [
    "k",
    "worker_id",
    "x",
    "tp_s",
    "tm_s",
    "wait_s",
    "v_pred",
    "v_actual",
    "loss",
    "iter_wall_s",
];

/// Formats with nine significant digits, trailing zeros trimmed.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let fixed = format!("{:.*}", (8 - exp) as usize, x);
        trim_fraction(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_fraction(mantissa))
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn round_sig9(x: f64) -> f64 {
    fmt_sig9(x).parse().expect("formatted float parses")
}

/// One `records.csv` row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub k: u64,
    pub worker_id: usize,
    pub x: u64,
    pub tp_s: f64,
    pub tm_s: f64,
    pub wait_s: f64,
    pub v_pred: f64,
    pub v_actual: f64,
    pub loss: f64,
    pub iter_wall_s: f64,
}

/// Flattens records into rows with reals rounded as they are written.
pub fn rows(records: &[IterationRecord]) -> Vec<RecordRow> {
    records
        .iter()
        .flat_map(|r| {
            r.workers.iter().map(move |w| RecordRow {
                k: r.k,
                worker_id: w.worker_id,
                x: w.x,
                tp_s: round_sig9(w.tp_s),
                tm_s: round_sig9(w.tm_s),
                wait_s: round_sig9(w.wait_s),
                v_pred: round_sig9(w.v_pred),
                v_actual: round_sig9(w.v_actual),
                loss: round_sig9(r.loss),
                iter_wall_s: round_sig9(r.iter_wall_s),
            })
        })
        .collect()
}

pub fn write_records_csv<W: Write>(records: &[IterationRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", RECORD_COLUMNS.join(","))?;
    for r in records {
        for w in &r.workers {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.k,
                w.worker_id,
                w.x,
                fmt_sig9(w.tp_s),
                fmt_sig9(w.tm_s),
                fmt_sig9(w.wait_s),
                fmt_sig9(w.v_pred),
                fmt_sig9(w.v_actual),
                fmt_sig9(r.loss),
                fmt_sig9(r.iter_wall_s),
            )?;
        }
    }
    Ok(())
}

pub fn records_csv(records: &[IterationRecord]) -> String {
    let mut buf = Vec::new();
    write_records_csv(records, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

/// Parses `records.csv`; columns are located by header name.
pub fn parse_records_csv(text: &str) -> Result<Vec<RecordRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let mut index = [0usize; 10];
    for (slot, name) in index.iter_mut().zip(RECORD_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let raw = |i: usize| record.get(index[i]).unwrap_or("");
        let int = |i: usize| -> Result<u64> {
            raw(i).parse().map_err(|_| Error::Parse {
                line,
                msg: format!(
                    "`{}` value `{}` is not a non-negative integer",
                    RECORD_COLUMNS[i],
                    raw(i)
                ),
            })
        };
        let real = |i: usize| -> Result<f64> {
            raw(i).parse().map_err(|_| Error::Parse {
                line,
                msg: format!("`{}` value `{}` is not a number", RECORD_COLUMNS[i], raw(i)),
            })
        };
        out.push(RecordRow {
            k: int(0)?,
            worker_id: int(1)? as usize,
            x: int(2)?,
            tp_s: real(3)?,
            tm_s: real(4)?,
            wait_s: real(5)?,
            v_pred: real(6)?,
            v_actual: real(7)?,
            loss: real(8)?,
            iter_wall_s: real(9)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Applied updates (distinct `k`).
    pub updates: u64,
    pub converged: bool,
    /// Updates applied when the convergence rule fired.
    pub updates_to_convergence: Option<u64>,
    pub time_to_convergence_s: Option<f64>,
    /// Mean iteration wall-clock over updates.
    pub mean_per_update_time: f64,
    /// Total waiting time over total worker time (`sum wait / sum iter_wall` over rows).
    pub wastage: f64,
    pub predictor_rmse: f64,
    pub sim_time_s: f64,
}

impl Metrics {
    pub fn from_records(records: &[IterationRecord], convergence: &Convergence) -> Metrics {
        Self::from_rows(&rows(records), convergence)
    }

    /// Rows must be grouped by `k` (as written).
    pub fn from_rows(rows: &[RecordRow], convergence: &Convergence) -> Metrics {
        let mut updates = 0u64;
        let mut sim_time = 0.0;
        let mut streak = 0u64;
        let mut reached: Option<(u64, f64)> = None;
        let mut previous_k = None;
        for r in rows {
            if previous_k == Some(r.k) {
                continue;
            }
            previous_k = Some(r.k);
            updates += 1;
            sim_time += r.iter_wall_s;
            streak = if r.loss < convergence.loss_threshold {
                streak + 1
            } else {
                0
            };
            if reached.is_none() && streak >= convergence.consecutive {
                reached = Some((updates, sim_time));
            }
        }
        let wall: f64 = rows.iter().map(|r| r.iter_wall_s).sum();
        let wait: f64 = rows.iter().map(|r| r.wait_s).sum();
        let squared: f64 = rows.iter().map(|r| (r.v_pred - r.v_actual).powi(2)).sum();
        Metrics {
            updates,
            converged: reached.is_some(),
            updates_to_convergence: reached.map(|(u, _)| u),
            time_to_convergence_s: reached.map(|(_, t)| t),
            mean_per_update_time: if updates == 0 { 0.0 } else { sim_time / updates as f64 },
            wastage: if wall > 0.0 { (wait / wall).clamp(0.0, 1.0) } else { 0.0 },
            predictor_rmse: if rows.is_empty() {
                0.0
            } else {
                (squared / rows.len() as f64).sqrt()
            },
            sim_time_s: sim_time,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::WorkerRecord;

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(-0.0), "0");
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(0.52), "0.52");
        assert_eq!(fmt_sig9(2.0 / 3.0), "0.666666667");
        assert_eq!(fmt_sig9(123456789.4), "123456789");
        assert_eq!(fmt_sig9(1234567890.0), "1.23456789e9");
        assert_eq!(fmt_sig9(1.5e-7), "1.5e-7");
        assert_eq!(fmt_sig9(-42.125), "-42.125");
        assert_eq!(fmt_sig9(9.9999999999), "10");
    }

    #[test]
    fn sig9_keeps_nine_digits() {
        for x in [std::f64::consts::PI, 1e-3 / 7.0, 98765.4321987, 3.0e12 / 7.0] {
            let r = round_sig9(x);
            assert!(((r - x) / x).abs() <= 5e-9, "{x} -> {r}");
            assert_eq!(round_sig9(r), r);
        }
    }

    fn record(k: u64, waits: &[f64], wall: f64, loss: f64) -> IterationRecord {
        IterationRecord {
            k,
            workers: waits
                .iter()
                .enumerate()
                .map(|(i, &w)| WorkerRecord {
                    worker_id: i,
                    x: 10,
                    tp_s: wall - w,
                    tm_s: 0.0,
                    wait_s: w,
                    v_pred: 10.0 + i as f64,
                    v_actual: 10.0,
                })
                .collect(),
            grad_norm: 1.0,
            loss,
            iter_wall_s: wall,
        }
    }

    #[test]
    fn metrics_arithmetic() {
        let conv = Convergence {
            loss_threshold: 0.6,
            consecutive: 2,
        };
        let recs = vec![
            record(0, &[0.0, 1.0], 2.0, 0.7),
            record(1, &[0.5, 0.0], 1.0, 0.5),
            record(2, &[0.0, 0.0], 3.0, 0.55),
            record(3, &[0.0, 0.0], 3.0, 0.4),
        ];
        let m = Metrics::from_records(&recs, &conv);
        assert_eq!(m.updates, 4);
        assert_eq!(m.updates_to_convergence, Some(3));
        assert_eq!(m.time_to_convergence_s, Some(6.0));
        assert!((m.mean_per_update_time - 9.0 / 4.0).abs() < 1e-15);
        assert!((m.wastage - 1.5 / 18.0).abs() < 1e-15);
        assert!((m.predictor_rmse - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((m.sim_time_s - 9.0).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip_preserves_rows() {
        let recs = vec![
            record(0, &[0.1 / 3.0, 0.0], 2.0 / 3.0, 0.123456789123),
            record(1, &[0.0, 0.0], 1.0, 0.6),
        ];
        let parsed = parse_records_csv(&records_csv(&recs)).unwrap();
        assert_eq!(parsed, rows(&recs));
        let conv = Convergence::default();
        assert_eq!(Metrics::from_rows(&parsed, &conv), Metrics::from_records(&recs, &conv));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_records_csv("k,worker_id\n"),
            Err(Error::MissingColumn(_))
        ));
        let bad = format!("{}\n0,0,x,1,1,1,1,1,1,1\n", RECORD_COLUMNS.join(","));
        assert!(matches!(parse_records_csv(&bad), Err(Error::Parse { line: 2, .. })));
    }
}
