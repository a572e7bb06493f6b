//! CSV schemas for per-round metrics and bound curves.
//!
//! Metrics files have exactly the columns of [`METRICS_COLUMNS`], in that
//! order, with a mandatory header row. Times are seconds except
//! `scheduler_wall_us`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedft::training::RoundTrace;
use crate::scheduler::Policy;

pub const METRICS_COLUMNS: [&str; 12] = [
    "run_id",
    "seed",
    "policy",
    "t",
    "n",
    "delay_s",
    "queue_s",
    "objective",
    "payload_bits",
    "train_loss",
    "test_accuracy",
    "scheduler_wall_us",
];

pub const BOUND_COLUMNS: [&str; 5] = ["t", "n", "varsigma", "weight_product", "cumulative_bound"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub policy: Policy,
    pub t: usize,
    pub n: usize,
    pub delay_s: f64,
    pub queue_s: f64,
    pub objective: f64,
    pub payload_bits: u64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub scheduler_wall_us: f64,
}

impl MetricsRow {
    pub fn from_trace(run_id: &str, seed: u64, policy: Policy, tr: &RoundTrace) -> Self {
        Self {
            run_id: run_id.to_string(),
            seed,
            policy,
            t: tr.t,
            n: tr.n,
            delay_s: tr.delay,
            queue_s: tr.queue,
            objective: tr.objective,
            payload_bits: tr.payload_bits,
            train_loss: tr.train_loss,
            test_accuracy: tr.test_accuracy,
            scheduler_wall_us: tr.scheduler_wall_us,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub t: usize,
    pub n: usize,
    pub varsigma: f64,
    pub weight_product: f64,
    pub cumulative_bound: f64,
}

pub fn write_rows<W: Write, T: Serialize>(writer: W, rows: &[T], columns: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    w.write_record(columns)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(file, rows, &METRICS_COLUMNS)
}

pub fn write_bound(path: &Path, rows: &[BoundRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(file, rows, &BOUND_COLUMNS)
}

/// Parses a metrics CSV, rejecting any header other than
/// [`METRICS_COLUMNS`] and any file without data rows. `path` only labels
/// errors.
pub fn parse_metrics<R: Read>(reader: R, path: &Path) -> Result<Vec<MetricsRow>> {
    let schema = |reason: String| Error::Schema {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = r.headers().map_err(|e| schema(e.to_string()))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::NoData(format!("{} is empty", path.display())));
    }
    if headers.iter().ne(METRICS_COLUMNS.iter().copied()) {
        return Err(schema(format!(
            "expected columns {}, found {}",
            METRICS_COLUMNS.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<MetricsRow>, _>>()
        .map_err(|e| schema(e.to_string()))?;
    if rows.is_empty() {
        return Err(Error::NoData(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(file, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: usize) -> MetricsRow {
        MetricsRow {
            run_id: "gs-s1".into(),
            seed: 1,
            policy: Policy::Gs,
            t,
            n: 4,
            delay_s: 0.1,
            queue_s: 0.0,
            objective: 4.0,
            payload_bits: 53_248,
            train_loss: 1.25,
            test_accuracy: 0.5,
            scheduler_wall_us: 12.5,
        }
    }

    fn to_string(rows: &[MetricsRow]) -> String {
        let mut buf = Vec::new();
        write_rows(&mut buf, rows, &METRICS_COLUMNS).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn header_is_fixed() {
        let text = to_string(&[row(1)]);
        assert_eq!(text.lines().next().unwrap(), METRICS_COLUMNS.join(","));
        assert_eq!(
            text.lines().nth(1).unwrap(),
            "gs-s1,1,gs,1,4,0.1,0.0,4.0,53248,1.25,0.5,12.5"
        );
    }

    #[test]
    fn round_trip() {
        let rows = vec![row(1), row(2)];
        let parsed = parse_metrics(to_string(&rows).as_bytes(), Path::new("m.csv")).unwrap();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn header_only_and_empty_are_no_data() {
        let header_only = to_string(&[]);
        assert!(matches!(
            parse_metrics(header_only.as_bytes(), Path::new("h.csv")),
            Err(Error::NoData(_))
        ));
        assert!(matches!(
            parse_metrics(&b""[..], Path::new("e.csv")),
            Err(Error::NoData(_))
        ));
    }

    #[test]
    fn wrong_columns_are_schema_errors() {
        let text = "run_id,seed,policy\nx,1,gs\n";
        assert!(matches!(
            parse_metrics(text.as_bytes(), Path::new("s.csv")),
            Err(Error::Schema { .. })
        ));
        let reordered = to_string(&[row(1)]).replacen("run_id,seed", "seed,run_id", 1);
        assert!(matches!(
            parse_metrics(reordered.as_bytes(), Path::new("r.csv")),
            Err(Error::Schema { .. })
        ));
        let bad_value = to_string(&[row(1)]).replace(",gs,", ",nope,");
        assert!(matches!(
            parse_metrics(bad_value.as_bytes(), Path::new("v.csv")),
            Err(Error::Schema { .. })
        ));
    }
}
