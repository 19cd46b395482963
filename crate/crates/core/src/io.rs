//! Trace and time-series CSV files, and JSON result records.
//!
//! Numbers are written in plain decimal notation using the shortest
//! representation that parses back to the identical `f64`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::stability::FrequencyTimeSeries;
use crate::transmission::SweepTrace;
use crate::units::dbm_to_watts;

pub const TRACE_HEADER: [&str; 2] = ["frequency_hz", "power_ratio"];
pub const TRACE_POUT_COLUMN: &str = "pout_dbm";
pub const SERIES_HEADER: [&str; 2] = ["time_s", "f_r_hz"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("empty file")]
    Empty,
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn parse_err(line: u64, message: impl Into<String>) -> IoError {
    IoError::Parse { line, message: message.into() }
}

fn write_columns<W: Write>(out: W, header: &[&str], columns: &[&[f64]]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_to_io)?;
    let rows = columns.first().map_or(0, |c| c.len());
    for i in 0..rows {
        w.write_record(columns.iter().map(|c| c[i].to_string())).map_err(csv_to_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_to_io(e: csv::Error) -> IoError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IoError::Io(io),
        other => parse_err(line, format!("{other:?}")),
    }
}

/// Parsed numeric rows with the header.
struct Table {
    header: Vec<String>,
    rows: Vec<(u64, Vec<Option<f64>>)>,
}

fn read_table<R: Read>(input: R) -> Result<Table, IoError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(IoError::Empty),
        Some(r) => r.map_err(csv_to_io)?.iter().map(str::to_string).collect::<Vec<_>>(),
    };
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_to_io)?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(parse_err(line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let values = rec
            .iter()
            .map(|field| {
                if field.is_empty() {
                    Ok(None)
                } else {
                    field
                        .parse::<f64>()
                        .map(Some)
                        .map_err(|_| parse_err(line, format!("cannot parse '{field}' as a number")))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((line, values));
    }
    if rows.is_empty() {
        return Err(IoError::Empty);
    }
    Ok(Table { header, rows })
}

pub fn write_trace_csv<W: Write>(out: W, trace: &SweepTrace) -> Result<(), IoError> {
    write_columns(out, &TRACE_HEADER, &[&trace.frequencies, &trace.power_ratio])
}

/// Reads `frequency_hz,power_ratio[,pout_dbm]`. When the third column is
/// present, rows with an empty `power_ratio` are filled from `pout_dbm`
/// relative to `p_in_dbm`, which must then be known.
pub fn read_trace_csv<R: Read>(input: R, p_in_dbm: Option<f64>) -> Result<SweepTrace, IoError> {
    let table = read_table(input)?;
    let with_pout = match table.header.as_slice() {
        [a, b] if a == TRACE_HEADER[0] && b == TRACE_HEADER[1] => false,
        [a, b, c] if a == TRACE_HEADER[0] && b == TRACE_HEADER[1] && c == TRACE_POUT_COLUMN => true,
        other => {
            return Err(parse_err(
                1,
                format!("unexpected header {:?}; want frequency_hz,power_ratio[,pout_dbm]", other.join(",")),
            ))
        }
    };
    let mut frequencies = Vec::with_capacity(table.rows.len());
    let mut power_ratio = Vec::with_capacity(table.rows.len());
    for (line, row) in &table.rows {
        let f = row[0].ok_or_else(|| parse_err(*line, "missing frequency"))?;
        let ratio = match (row[1], with_pout.then(|| row[2]).flatten()) {
            (Some(r), _) => r,
            (None, Some(pout)) => {
                let p_in = p_in_dbm.ok_or_else(|| {
                    parse_err(*line, "pout_dbm needs the input power (--p-in-dbm) to convert")
                })?;
                dbm_to_watts(pout) / dbm_to_watts(p_in)
            }
            (None, None) => return Err(parse_err(*line, "missing power ratio")),
        };
        frequencies.push(f);
        power_ratio.push(ratio);
    }
    SweepTrace::new(frequencies, power_ratio, p_in_dbm.unwrap_or(f64::NAN), 0.0)
        .map_err(|e| IoError::Invalid(e.to_string()))
}

pub fn write_series_csv<W: Write>(out: W, series: &FrequencyTimeSeries) -> Result<(), IoError> {
    write_columns(out, &SERIES_HEADER, &[&series.timestamps, &series.f_r])
}

/// Reads `time_s,f_r_hz`. The reference frequency defaults to the first sample.
pub fn read_series_csv<R: Read>(input: R, f0: Option<f64>) -> Result<FrequencyTimeSeries, IoError> {
    let table = read_table(input)?;
    if table.header != SERIES_HEADER {
        return Err(parse_err(1, format!("unexpected header {:?}; want time_s,f_r_hz", table.header.join(","))));
    }
    let mut t = Vec::with_capacity(table.rows.len());
    let mut f = Vec::with_capacity(table.rows.len());
    for (line, row) in &table.rows {
        t.push(row[0].ok_or_else(|| parse_err(*line, "missing time"))?);
        f.push(row[1].ok_or_else(|| parse_err(*line, "missing frequency"))?);
    }
    let f0 = f0.unwrap_or(f[0]);
    FrequencyTimeSeries::new(t, f, f0).map_err(|e| IoError::Invalid(e.to_string()))
}

/// Provenance wrapper written by every JSON-producing command. Contains no
/// wall-clock time, so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord<T> {
    pub toolkit_version: String,
    pub command: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub output: T,
}

impl<T> SessionRecord<T> {
    pub fn new(command: &str, config: &ExperimentConfig, output: T) -> Self {
        Self {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: config.seed,
            config: config.clone(),
            output,
        }
    }
}

pub fn write_json<W: Write, T: Serialize>(mut out: W, value: &T) -> Result<(), IoError> {
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn trace_header_is_exact() {
        let t = SweepTrace::new(vec![6.8e9, 6.80001e9], vec![1.0, 0.5], -131.0, 0.0).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "frequency_hz,power_ratio\n6800000000,1\n6800010000,0.5\n");
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(read_trace_csv(&b""[..], None), Err(IoError::Empty)));
        assert!(matches!(read_trace_csv(&b"frequency_hz,power_ratio\n"[..], None), Err(IoError::Empty)));
    }

    #[test]
    fn parse_errors_carry_the_line() {
        let text = "frequency_hz,power_ratio\n1,1\n2,abc\n";
        match read_trace_csv(text.as_bytes(), None) {
            Err(IoError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let wrong = "freq,ratio\n1,1\n";
        assert!(matches!(read_trace_csv(wrong.as_bytes(), None), Err(IoError::Parse { line: 1, .. })));
    }

    #[test]
    fn pout_column_converts_with_input_power() {
        let text = "frequency_hz,power_ratio,pout_dbm\n1,,-134\n2,0.25,\n";
        let t = read_trace_csv(text.as_bytes(), Some(-131.0)).unwrap();
        assert!((t.power_ratio[0] - 10f64.powf(-0.3)).abs() < 1e-12);
        assert_eq!(t.power_ratio[1], 0.25);
        assert!(matches!(read_trace_csv(text.as_bytes(), None), Err(IoError::Parse { line: 2, .. })));
    }

    #[test]
    fn series_round_trip_and_default_reference() {
        let s = FrequencyTimeSeries::new(vec![0.0, 120.0, 240.0], vec![6.8e9, 6.8e9 + 1.5, 6.8e9 - 2.25], 6.8e9)
            .unwrap();
        let mut buf = Vec::new();
        write_series_csv(&mut buf, &s).unwrap();
        assert!(buf.starts_with(b"time_s,f_r_hz\n"));
        let back = read_series_csv(&buf[..], None).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn trace_csv_round_trip_is_exact(
            start in 1e6f64..1e11,
            steps in proptest::collection::vec(1e-3f64..1e6, 1..50),
            ratios in proptest::collection::vec(0.0f64..2.0, 50),
        ) {
            let mut f = vec![start];
            for s in &steps {
                let next = f.last().unwrap() + s;
                if next > *f.last().unwrap() { f.push(next); }
            }
            let p = ratios[..f.len()].to_vec();
            let t = SweepTrace::new(f, p, -131.0, 0.0).unwrap();
            let mut buf = Vec::new();
            write_trace_csv(&mut buf, &t).unwrap();
            let back = read_trace_csv(&buf[..], Some(-131.0)).unwrap();
            prop_assert_eq!(back.frequencies, t.frequencies);
            prop_assert_eq!(back.power_ratio, t.power_ratio);
        }
    }
}
