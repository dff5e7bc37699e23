//! CSV representation of frames.
//!
//! Layout: a mandatory header with a `timestamp` column (ISO-8601 UTC,
//! e.g. `2023-05-01T13:00:00Z`) plus one column per channel named by its
//! acronym. Missing values are empty fields. Floats are written with
//! shortest round-trippable precision, so `read_frame(write_frame(f))`
//! reproduces `f` exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};

use crate::error::{Error, Result};
use crate::frame::{ChannelRegistry, RangeViolation, Resolution, TimeSeriesFrame};

/// Parse a frame CSV. Every non-timestamp column must exist in the
/// registry; rows must be sorted, duplicate-free, and exactly spaced for
/// the declared resolution. Out-of-range values are returned in the
/// report, not clamped.
pub fn read_frame(
    path: &Path,
    registry: &ChannelRegistry,
    site: &str,
    season: i32,
    resolution: Resolution,
) -> Result<(TimeSeriesFrame, Vec<RangeViolation>)> {
    let file = File::open(path)?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));

    let headers = reader.headers()?.clone();
    let mut columns = headers.iter().enumerate();
    let err_at = |row: usize, message: String| Error::CsvFormat {
        path: path.to_path_buf(),
        row,
        message,
    };
    match columns.next() {
        Some((_, "timestamp")) => {}
        _ => return Err(err_at(0, "first column must be `timestamp`".into())),
    }
    let mut specs = Vec::new();
    for (_, name) in columns {
        let spec = registry
            .get(name)
            .ok_or_else(|| Error::UnknownChannel(name.to_string()))?;
        specs.push(spec.clone());
    }

    let mut timestamps: Vec<DateTime<Utc>> = Vec::new();
    let mut values: Vec<Vec<Option<f64>>> = vec![Vec::new(); specs.len()];
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let row = row_idx + 1;
        if record.len() != specs.len() + 1 {
            return Err(err_at(row, format!("expected {} fields", specs.len() + 1)));
        }
        let ts = DateTime::parse_from_rfc3339(&record[0])
            .map_err(|e| err_at(row, format!("unparsable timestamp `{}`: {e}", &record[0])))?
            .with_timezone(&Utc);
        if let Some(prev) = timestamps.last() {
            if ts == *prev {
                return Err(err_at(row, format!("duplicate timestamp {ts}")));
            }
            if ts < *prev {
                return Err(err_at(row, format!("timestamp {ts} out of order")));
            }
            if ts.timestamp() - prev.timestamp() != resolution.step_seconds() {
                return Err(err_at(
                    row,
                    format!("irregular spacing before {ts} for {resolution} resolution"),
                ));
            }
        }
        timestamps.push(ts);
        for (col, field) in record.iter().skip(1).enumerate() {
            let cell = if field.is_empty() {
                None
            } else {
                Some(field.parse::<f64>().map_err(|_| {
                    err_at(row, format!("non-numeric cell `{field}` in column `{}`", specs[col].acronym))
                })?)
            };
            values[col].push(cell);
        }
    }

    let frame = TimeSeriesFrame::new(site, season, resolution, timestamps, specs, values)?;
    let violations = frame.range_violations();
    Ok((frame, violations))
}

pub fn write_frame(frame: &TimeSeriesFrame, path: &Path) -> Result<()> {
    frame.validate()?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["timestamp".to_string()];
    header.extend(frame.channels().iter().map(|c| c.acronym.clone()));
    writer.write_record(&header)?;
    for (row, ts) in frame.timestamps().iter().enumerate() {
        let mut record = Vec::with_capacity(header.len());
        record.push(ts.to_rfc3339_opts(SecondsFormat::Secs, true));
        for col in 0..frame.channels().len() {
            record.push(match frame.values_by_index(col)[row] {
                // `{}` on f64 is the shortest representation that parses
                // back to the same bits.
                Some(v) => format!("{v}"),
                None => String::new(),
            });
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Write a validation report (row, channel, issue) next to a frame.
pub fn write_validation_report(violations: &[RangeViolation], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut writer = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    writer.write_record(["row", "channel", "issue"])?;
    for v in violations {
        writer.write_record([
            v.row.to_string(),
            v.channel.clone(),
            format!("value {} outside [{}, {}]", v.value, v.range.0, v.range.1),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::hourly_frame;
    use std::io::Write as _;

    fn registry() -> ChannelRegistry {
        ChannelRegistry::standard()
    }

    /// Content equality: read_frame resolves specs from the registry, so
    /// units/ranges may differ from a hand-built fixture frame.
    fn assert_round_trip(back: &TimeSeriesFrame, original: &TimeSeriesFrame) {
        assert_eq!(back.timestamps(), original.timestamps());
        let back_names: Vec<_> = back.channels().iter().map(|c| &c.acronym).collect();
        let orig_names: Vec<_> = original.channels().iter().map(|c| &c.acronym).collect();
        assert_eq!(back_names, orig_names);
        for spec in original.channels() {
            assert_eq!(
                back.values(&spec.acronym).unwrap(),
                original.values(&spec.acronym).unwrap(),
                "channel {}",
                spec.acronym
            );
        }
    }

    #[test]
    fn read_simple_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        std::fs::write(
            &path,
            "timestamp,MET\n2023-05-01T00:00:00Z,1.5\n2023-05-01T01:00:00Z,\n2023-05-01T02:00:00Z,-3\n",
        )
        .unwrap();
        let (frame, _) = read_frame(&path, &registry(), "M", 2023, Resolution::Hourly).unwrap();
        assert_eq!(frame.len(), 3);
        assert_eq!(
            frame.values("MET").unwrap(),
            &[Some(1.5), None, Some(-3.0)]
        );
    }

    #[test]
    fn duplicate_timestamp_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        std::fs::write(
            &path,
            "timestamp,MET\n2023-05-01T00:00:00Z,1\n2023-05-01T00:00:00Z,2\n",
        )
        .unwrap();
        let err = read_frame(&path, &registry(), "M", 2023, Resolution::Hourly).unwrap_err();
        assert!(err.to_string().contains("duplicate timestamp"));
    }

    #[test]
    fn unknown_column_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        std::fs::write(&path, "timestamp,XYZ\n2023-05-01T00:00:00Z,1\n").unwrap();
        let err = read_frame(&path, &registry(), "M", 2023, Resolution::Hourly).unwrap_err();
        assert!(matches!(err, Error::UnknownChannel(_)));
    }

    #[test]
    fn non_numeric_cell_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        std::fs::write(&path, "timestamp,MET\n2023-05-01T00:00:00Z,abc\n").unwrap();
        assert!(read_frame(&path, &registry(), "M", 2023, Resolution::Hourly).is_err());
    }

    #[test]
    fn irregular_spacing_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        std::fs::write(
            &path,
            "timestamp,MET\n2023-05-01T00:00:00Z,1\n2023-05-01T00:20:00Z,2\n",
        )
        .unwrap();
        let err = read_frame(&path, &registry(), "M", 2023, Resolution::Hourly).unwrap_err();
        assert!(err.to_string().contains("irregular spacing"));
    }

    #[test]
    fn round_trip_is_exact_with_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let frame = hourly_frame(
            "M",
            0,
            &[
                ("IT", vec![Some(0.1 + 0.2), None, Some(-1e-17), Some(27932.5)]),
                ("MET", vec![Some(f64::MIN_POSITIVE), Some(1.0 / 3.0), Some(0.0), None]),
            ],
        );
        write_frame(&frame, &path).unwrap();
        let (back, _) = read_frame(&path, &registry(), "M", 2023, Resolution::Hourly).unwrap();
        assert_round_trip(&back, &frame);
    }

    #[test]
    fn round_trip_at_paper_scale() {
        // 27,932 rows: the hourly dataset size used as a scale target.
        let n = 27_932usize;
        let mut rng = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64
        };
        let vals: Vec<Option<f64>> = (0..n)
            .map(|i| if i % 97 == 0 { None } else { Some(next() * 100.0 - 50.0) })
            .collect();
        let frame = hourly_frame("M", 0, &[("IT", vals)]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.csv");
        write_frame(&frame, &path).unwrap();
        let (back, _) = read_frame(&path, &registry(), "M", 2023, Resolution::Hourly).unwrap();
        assert_round_trip(&back, &frame);
    }

    #[test]
    fn column_order_follows_header_not_registry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let mut file = std::fs::File::create(&path).unwrap();
        writeln!(file, "timestamp,IT,MET").unwrap();
        writeln!(file, "2023-05-01T00:00:00Z,5,10").unwrap();
        drop(file);
        let (frame, _) = read_frame(&path, &registry(), "M", 2023, Resolution::Hourly).unwrap();
        assert_eq!(frame.channels()[0].acronym, "IT");
        assert_eq!(frame.values("IT").unwrap()[0], Some(5.0));
        assert_eq!(frame.values("MET").unwrap()[0], Some(10.0));
    }
}
