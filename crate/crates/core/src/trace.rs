//! Machine resource-availability traces.
//!
//! File format: UTF-8 CSV with header `machine_id,t_offset_s,cpu_avail,mem_avail`,
//! one row per (machine, time offset). Availability columns are fractions of
//! the machine left over for the training job.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const TRACE_COLUMNS: [&str; 4] = ["machine_id", "t_offset_s", "cpu_avail", "mem_avail"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TracePoint {
    pub t_offset_s: f64,
    pub cpu_avail: f64,
    pub mem_avail: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceTrace {
    pub machine_id: String,
    /// Sorted by time offset.
    pub rows: Vec<TracePoint>,
}

impl ResourceTrace {
    pub fn new(machine_id: impl Into<String>, mut rows: Vec<TracePoint>) -> Result<Self> {
        for r in &rows {
            validate_point(r).map_err(Error::InvalidArgument)?;
        }
        rows.sort_by(|a, b| a.t_offset_s.total_cmp(&b.t_offset_s));
        Ok(ResourceTrace {
            machine_id: machine_id.into(),
            rows,
        })
    }

    pub fn mean_cpu(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.cpu_avail).sum::<f64>() / self.rows.len() as f64
    }
}

fn validate_point(p: &TracePoint) -> std::result::Result<(), String> {
    if !(p.t_offset_s >= 0.0 && p.t_offset_s.is_finite()) {
        return Err(format!("t_offset_s must be a finite value >= 0, got {}", p.t_offset_s));
    }
    for (name, v) in [("cpu_avail", p.cpu_avail), ("mem_avail", p.mem_avail)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(format!("{name} must be within [0, 1], got {v}"));
        }
    }
    Ok(())
}

pub fn parse_trace(path: &Path) -> Result<Vec<ResourceTrace>> {
    let file = std::fs::File::open(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    parse_trace_reader(file)
}

pub fn parse_trace_str(text: &str) -> Result<Vec<ResourceTrace>> {
    parse_trace_reader(text.as_bytes())
}

/// One trace per machine, in order of first appearance. Rows are sorted by
/// time offset within each machine.
pub fn parse_trace_reader<R: Read>(reader: R) -> Result<Vec<ResourceTrace>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_error(&e, 1))?.clone();
    let mut index = [0usize; 4];
    for (slot, name) in index.iter_mut().zip(TRACE_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_machine: HashMap<String, Vec<TracePoint>> = HashMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| csv_error(&e, 0))?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<&str> {
            record.get(index[i]).ok_or_else(|| Error::Parse {
                line,
                msg: format!("missing value for `{}`", TRACE_COLUMNS[i]),
            })
        };
        let number = |i: usize| -> Result<f64> {
            let raw = field(i)?;
            raw.parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("`{}` value `{raw}` is not a number", TRACE_COLUMNS[i]),
            })
        };
        let machine = field(0)?.to_string();
        if machine.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty machine_id".into(),
            });
        }
        let point = TracePoint {
            t_offset_s: number(1)?,
            cpu_avail: number(2)?,
            mem_avail: number(3)?,
        };
        validate_point(&point).map_err(|msg| Error::Parse { line, msg })?;
        by_machine
            .entry(machine.clone())
            .or_insert_with(|| {
                order.push(machine);
                Vec::new()
            })
            .push(point);
    }

    Ok(order
        .into_iter()
        .map(|id| {
            let mut rows = by_machine.remove(&id).unwrap_or_default();
            rows.sort_by(|a, b| a.t_offset_s.total_cmp(&b.t_offset_s));
            ResourceTrace { machine_id: id, rows }
        })
        .collect())
}

fn csv_error(e: &csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Serialises traces in the same CSV format; floats use the shortest
/// representation that parses back to the identical value.
pub fn write_traces(traces: &[ResourceTrace]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(TRACE_COLUMNS).expect("in-memory write");
    for t in traces {
        for r in &t.rows {
            w.write_record([
                t.machine_id.as_str(),
                &r.t_offset_s.to_string(),
                &r.cpu_avail.to_string(),
                &r.mem_avail.to_string(),
            ])
            .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

/// Step interpolation: the row with the latest offset `<= time`; queries
/// before the first row return the first row.
pub fn trace_at(trace: &ResourceTrace, time: f64) -> Result<(f64, f64)> {
    let first = trace.rows.first().ok_or(Error::Empty("resource trace"))?;
    if !(time >= 0.0) {
        return Err(Error::InvalidArgument(format!("query time must be >= 0, got {time}")));
    }
    let idx = trace.rows.partition_point(|r| r.t_offset_s <= time);
    let row = if idx == 0 { first } else { &trace.rows[idx - 1] };
    Ok((row.cpu_avail, row.mem_avail))
}

/// Chooses one source machine per worker.
///
/// Machines are ranked by mean CPU availability and split into `n` equal
/// strata; each worker draws one machine uniformly from its own stratum, and
/// the resulting list is shuffled. When `n` equals the number of traces this
/// is a permutation. Returns indices into `traces`.
pub fn map_traces(traces: &[ResourceTrace], n: usize, seed: u64) -> Result<Vec<usize>> {
    if traces.is_empty() {
        return Err(Error::Empty("trace set"));
    }
    let mut ranked: Vec<usize> = (0..traces.len()).collect();
    ranked.sort_by(|&a, &b| traces[a].mean_cpu().total_cmp(&traces[b].mean_cpu()).then(a.cmp(&b)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = traces.len();
    let mut picks: Vec<usize> = (0..n)
        .map(|j| {
            let lo = j * total / n;
            let hi = ((j + 1) * total / n).max(lo + 1).min(total);
            ranked[rng.random_range(lo..hi)]
        })
        .collect();
    picks.shuffle(&mut rng);
    Ok(picks)
}

/// Synthetic heterogeneous machines for trace-driven scenarios: each machine
/// has its own baseline availability and switches to a random level at
/// exponentially distributed intervals.
pub fn synthetic_traces(machines: usize, duration_s: f64, mean_dwell_s: f64, seed: u64) -> Vec<ResourceTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..machines)
        .map(|i| {
            let base_cpu: f64 = rng.random_range(0.35..1.0);
            let base_mem: f64 = rng.random_range(0.5..1.0);
            let mut rows = Vec::new();
            let mut t = 0.0;
            while t <= duration_s {
                let busy = rng.random_bool(0.3);
                let cpu = if busy {
                    base_cpu * rng.random_range(0.4..0.9)
                } else {
                    base_cpu
                };
                let mem = if busy {
                    base_mem * rng.random_range(0.6..1.0)
                } else {
                    base_mem
                };
                rows.push(TracePoint {
                    t_offset_s: t,
                    cpu_avail: cpu,
                    mem_avail: mem,
                });
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                t += -mean_dwell_s * u.ln();
            }
            ResourceTrace {
                machine_id: format!("m{i:04}"),
                rows,
            }
        })
        .collect()
}
