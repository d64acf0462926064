//! Per-iteration error CSV.
//!
//! Columns: `iteration, traj_0 .. traj_{N-1}, mean, stddev`. Errors are
//! target minus poured grams; `stddev` is the population standard
//! deviation. Floats use the shortest representation that parses back to
//! the same value.

use std::io::Write;

use crate::error::{Error, Result};
use crate::gps::IterationReport;

pub fn csv_header(trajectories: usize) -> String {
    let mut cols = vec!["iteration".to_string()];
    cols.extend((0..trajectories).map(|k| format!("traj_{k}")));
    cols.push("mean".into());
    cols.push("stddev".into());
    cols.join(",")
}

pub fn csv_row(report: &IterationReport) -> String {
    let mut cols = vec![report.iteration.to_string()];
    cols.extend(report.errors.iter().map(|e| e.to_string()));
    cols.push(report.mean.to_string());
    cols.push(report.stddev.to_string());
    cols.join(",")
}

pub fn write_csv<W: Write>(mut out: W, reports: &[IterationReport]) -> Result<()> {
    let n = reports.first().map_or(0, |r| r.errors.len());
    writeln!(out, "{}", csv_header(n))?;
    for r in reports {
        if r.errors.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: r.errors.len(),
            });
        }
        writeln!(out, "{}", csv_row(r))?;
    }
    Ok(())
}

/// Parsed CSV row: iteration, errors, mean, stddev.
pub type CsvRow = (usize, Vec<f64>, f64, f64);

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let bad = |line: usize, msg: &str| Error::InvalidArgument(format!("csv line {line}: {msg}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad(1, "missing header"))?;
    let cols = header.split(',').count();
    if cols < 3 {
        return Err(bad(1, "too few columns"));
    }
    let n = cols - 3;
    if header != csv_header(n) {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(bad(i + 2, "wrong column count"));
            }
            let iteration = fields[0].parse().map_err(|_| bad(i + 2, "bad iteration"))?;
            let nums = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| bad(i + 2, "bad number")))
                .collect::<Result<Vec<_>>>()?;
            Ok((iteration, nums[..n].to_vec(), nums[n], nums[n + 1]))
        })
        .collect()
}
