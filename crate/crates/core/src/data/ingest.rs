//! Raw accelerometer CSV ingest.
//!
//! Rows are `subject,activity,timestamp_ns,x,y,z`. A header row is
//! optional, and a trailing `;` on the last field (as in the WISDM
//! distribution files) is tolerated.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::types::{Sample, SubjectId};
use crate::error::{Error, Result};

pub type GroupKey = (SubjectId, String);

#[derive(Debug, Clone, PartialEq)]
pub struct MalformedRow {
    /// 1-based line number.
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    /// Samples grouped by `(subject, activity)`, each group time-sorted.
    pub groups: BTreeMap<GroupKey, Vec<Sample>>,
    pub malformed: Vec<MalformedRow>,
    pub valid_rows: usize,
}

pub fn ingest_csv(path: impl AsRef<Path>) -> Result<IngestReport> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file)
}

pub fn ingest_reader(reader: impl Read) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut report = IngestReport::default();
    for (i, record) in rdr.records().enumerate() {
        let line = record
            .as_ref()
            .ok()
            .and_then(|r| r.position().map(|p| p.line()))
            .unwrap_or(i as u64 + 1);
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                report.malformed.push(MalformedRow {
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if i == 0 && record.get(0).is_some_and(|f| f.eq_ignore_ascii_case("subject")) {
            continue;
        }
        if record.iter().all(str::is_empty) {
            continue;
        }
        match parse_row(&record) {
            Ok(sample) => {
                report.valid_rows += 1;
                report
                    .groups
                    .entry((sample.subject, sample.activity.clone()))
                    .or_default()
                    .push(sample);
            }
            Err(reason) => report.malformed.push(MalformedRow { line, reason }),
        }
    }
    if report.valid_rows == 0 {
        return Err(Error::Data(format!(
            "no valid rows ({} malformed)",
            report.malformed.len()
        )));
    }
    for samples in report.groups.values_mut() {
        samples.sort_by_key(|s| s.timestamp_ns);
    }
    Ok(report)
}

fn parse_row(record: &csv::StringRecord) -> std::result::Result<Sample, String> {
    if record.len() < 6 {
        return Err(format!("expected 6 fields, found {}", record.len()));
    }
    let field = |i: usize| record[i].trim_end_matches(';').trim();
    let subject = field(0)
        .parse::<u32>()
        .map_err(|e| format!("subject '{}': {e}", field(0)))?;
    let activity = field(1);
    if activity.is_empty() {
        return Err("empty activity".into());
    }
    let timestamp_ns = field(2)
        .parse::<i64>()
        .map_err(|e| format!("timestamp '{}': {e}", field(2)))?;
    let mut accel = [0.0; 3];
    for (axis, v) in accel.iter_mut().enumerate() {
        let raw = field(3 + axis);
        *v = raw
            .parse::<f64>()
            .map_err(|e| format!("acceleration '{raw}': {e}"))?;
        if !v.is_finite() {
            return Err(format!("non-finite acceleration '{raw}'"));
        }
    }
    Ok(Sample {
        subject: SubjectId(subject),
        activity: activity.to_string(),
        timestamp_ns,
        accel,
    })
}

/// Writes groups back out in the ingest format (with header).
pub fn write_csv(groups: &BTreeMap<GroupKey, Vec<Sample>>, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "subject,activity,timestamp_ns,x,y,z")?;
    for samples in groups.values() {
        for s in samples {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.subject, s.activity, s.timestamp_ns, s.accel[0], s.accel[1], s.accel[2]
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_row_gives_single_group() {
        let r = ingest_reader("1600,A,100,0.5,-1.0,9.81\n".as_bytes()).unwrap();
        assert_eq!(r.groups.len(), 1);
        let g = &r.groups[&(SubjectId(1600), "A".to_string())];
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].accel, [0.5, -1.0, 9.81]);
        assert!(r.malformed.is_empty());
    }

    #[test]
    fn non_numeric_acceleration_is_skipped_and_reported() {
        let csv = "subject,activity,timestamp_ns,x,y,z\n1,A,1,0,0,0\n1,A,2,zero,0,0\n1,A,3,0,0,1;\n";
        let r = ingest_reader(csv.as_bytes()).unwrap();
        assert_eq!(r.malformed.len(), 1);
        assert_eq!(r.malformed[0].line, 3);
        assert_eq!(r.valid_rows, 2);
    }

    #[test]
    fn groups_are_time_sorted() {
        let csv = "2,B,30,0,0,0\n2,B,10,1,1,1\n1,A,5,0,0,0\n2,B,20,2,2,2\n";
        let r = ingest_reader(csv.as_bytes()).unwrap();
        let ts: Vec<i64> = r.groups[&(SubjectId(2), "B".into())]
            .iter()
            .map(|s| s.timestamp_ns)
            .collect();
        assert_eq!(ts, vec![10, 20, 30]);
    }

    #[test]
    fn empty_or_all_bad_input_is_an_error() {
        assert!(matches!(ingest_reader("".as_bytes()), Err(Error::Data(_))));
        assert!(ingest_reader("x,y\n".as_bytes()).is_err());
    }

    #[test]
    fn round_trip_through_writer() {
        let csv = "7,A,1,0.1,0.2,0.30000000000000004\n7,A,2,-1e-7,3.5,-78\n8,C,9,1,2,3\n";
        let first = ingest_reader(csv.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_csv(&first.groups, &mut buf).unwrap();
        let second = ingest_reader(buf.as_slice()).unwrap();
        assert_eq!(first.groups, second.groups);
    }
}
