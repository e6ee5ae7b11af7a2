//! Streamflow CSV ingestion and the scenario/rollout CSV writers.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::synth::History;

/// One observation: `timestamp,unit_id,inflow_m3s[,release_m3s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub timestamp: i64,
    pub unit_id: usize,
    pub inflow_m3s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub release_m3s: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: String },
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("{path}: no records")]
    Empty { path: String },
    #[error("{path}: {message}")]
    Shape { path: String, message: String },
    #[error("{path}: {err}")]
    Io { path: String, err: std::io::Error },
}

pub const REQUIRED_COLUMNS: [&str; 3] = ["timestamp", "unit_id", "inflow_m3s"];

/// Parses records from any reader; `name` labels error messages.
pub fn read_records<R: Read>(
    reader: R,
    name: &str,
    need_release: bool,
) -> Result<Vec<Record>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_error(name, &e))?
        .iter()
        .map(str::to_owned)
        .collect::<Vec<_>>();
    if headers.iter().all(|h| h.is_empty()) {
        return Err(DataError::Empty { path: name.into() });
    }
    let mut required: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    if need_release {
        required.push("release_m3s");
    }
    for col in required {
        if !headers.iter().any(|h| h == col) {
            return Err(DataError::MissingColumn {
                path: name.into(),
                column: col.into(),
            });
        }
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<Record>() {
        let rec = row.map_err(|e| parse_error(name, &e))?;
        if !rec.inflow_m3s.is_finite() || rec.inflow_m3s < 0.0 {
            return Err(DataError::Parse {
                path: name.into(),
                line: out.len() as u64 + 2,
                message: format!("inflow {} is not a nonnegative number", rec.inflow_m3s),
            });
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(DataError::Empty { path: name.into() });
    }
    Ok(out)
}

fn parse_error(name: &str, e: &csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line());
    let message = match e.kind() {
        csv::ErrorKind::Deserialize { err, .. } => match err.field() {
            Some(f) => format!("field {}: {}", f + 1, err.kind()),
            None => err.kind().to_string(),
        },
        _ => e.to_string(),
    };
    DataError::Parse {
        path: name.into(),
        line,
        message,
    }
}

pub fn read_history(path: &Path, need_release: bool) -> Result<History, DataError> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|err| DataError::Io {
        path: name.clone(),
        err,
    })?;
    let records = read_records(file, &name, need_release)?;
    history_from_records(&records, &name)
}

/// Groups records per unit, ordered by timestamp. Units must be numbered
/// `0..n` and share the same timestamps.
pub fn history_from_records(records: &[Record], name: &str) -> Result<History, DataError> {
    let shape = |message: String| DataError::Shape {
        path: name.into(),
        message,
    };
    let mut by_unit: BTreeMap<usize, BTreeMap<i64, (f64, Option<f64>)>> = BTreeMap::new();
    for r in records {
        if by_unit
            .entry(r.unit_id)
            .or_default()
            .insert(r.timestamp, (r.inflow_m3s, r.release_m3s))
            .is_some()
        {
            return Err(shape(format!(
                "duplicate timestamp {} for unit {}",
                r.timestamp, r.unit_id
            )));
        }
    }
    let n = by_unit.len();
    if by_unit.keys().copied().ne(0..n) {
        return Err(shape(format!("unit ids must be 0..{n}")));
    }
    let stamps: Vec<i64> = by_unit[&0].keys().copied().collect();
    let mut inflow = Vec::with_capacity(n);
    let mut release = Vec::with_capacity(n);
    for (unit, series) in &by_unit {
        if series.keys().copied().ne(stamps.iter().copied()) {
            return Err(shape(format!(
                "unit {unit} does not share the timestamps of unit 0"
            )));
        }
        inflow.push(series.values().map(|v| v.0).collect());
        release.push(series.values().map(|v| v.1.unwrap_or(f64::NAN)).collect());
    }
    Ok(History { inflow, release })
}

pub fn write_records<W: Write>(writer: W, records: &[Record]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Scenario batch rows: `scenario_id,unit,step,inflow`.
pub fn write_scenarios<W: Write>(writer: W, batch: &[(usize, Vec<Vec<f64>>)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["scenario_id", "unit", "step", "inflow"])?;
    for (id, traj) in batch {
        for (unit, series) in traj.iter().enumerate() {
            for (step, q) in series.iter().enumerate() {
                w.write_record([
                    id.to_string(),
                    unit.to_string(),
                    step.to_string(),
                    q.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            read_records("".as_bytes(), "x.csv", false),
            Err(DataError::Empty { .. })
        ));
        let only_header = "timestamp,unit_id,inflow_m3s\n";
        assert!(matches!(
            read_records(only_header.as_bytes(), "x.csv", false),
            Err(DataError::Empty { .. })
        ));
    }

    #[test]
    fn missing_column_is_named() {
        let text = "timestamp,unit,inflow_m3s\n0,0,1.0\n";
        let err = read_records(text.as_bytes(), "x.csv", false).unwrap_err();
        assert!(err.to_string().contains("`unit_id`"), "{err}");
        let text = "timestamp,unit_id,inflow_m3s\n0,0,1.0\n";
        let err = read_records(text.as_bytes(), "x.csv", true).unwrap_err();
        assert!(err.to_string().contains("`release_m3s`"), "{err}");
    }

    #[test]
    fn scenario_batch_is_long_format() {
        let batch = vec![(4, vec![vec![1.0, 2.0], vec![3.5, 4.0]])];
        let mut buf = Vec::new();
        write_scenarios(&mut buf, &batch).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "scenario_id,unit,step,inflow\n4,0,0,1\n4,0,1,2\n4,1,0,3.5\n4,1,1,4\n"
        );
    }

    #[test]
    fn parse_error_reports_the_line() {
        let text = "timestamp,unit_id,inflow_m3s\n0,0,1.0\n1,0,abc\n";
        let err = read_records(text.as_bytes(), "x.csv", false).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn records_round_trip() {
        let recs = vec![
            Record {
                timestamp: 1,
                unit_id: 1,
                inflow_m3s: 5.0,
                release_m3s: Some(4.0),
            },
            Record {
                timestamp: 0,
                unit_id: 0,
                inflow_m3s: 2.5,
                release_m3s: Some(2.0),
            },
            Record {
                timestamp: 1,
                unit_id: 0,
                inflow_m3s: 3.5,
                release_m3s: Some(3.0),
            },
            Record {
                timestamp: 0,
                unit_id: 1,
                inflow_m3s: 4.5,
                release_m3s: Some(1.0),
            },
        ];
        let mut buf = Vec::new();
        write_records(&mut buf, &recs).unwrap();
        let back = read_records(buf.as_slice(), "mem", true).unwrap();
        assert_eq!(back, recs);
        let h = history_from_records(&back, "mem").unwrap();
        assert_eq!(h.inflow, vec![vec![2.5, 3.5], vec![4.5, 5.0]]);
        assert_eq!(h.release[1], vec![1.0, 4.0]);
    }

    #[test]
    fn ragged_units_are_rejected() {
        let text = "timestamp,unit_id,inflow_m3s\n0,0,1.0\n1,0,1.0\n0,1,1.0\n";
        let recs = read_records(text.as_bytes(), "x.csv", false).unwrap();
        assert!(history_from_records(&recs, "x.csv").is_err());
    }
}
