//! Cleaning and transformation: resampling, gap filling, replicate
//! averaging, redundant-pair merging, one-hot site encoding, and linear
//! min-max normalization.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Aggregation, ChannelKind, ChannelSpec, Resolution, TimeSeriesFrame};

/// One gap (or fill action) in the gap report CSV
/// (channel, start, end, length, action).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRecord {
    pub channel: String,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub length: usize,
    pub action: String,
}

pub fn write_gap_report(records: &[GapRecord], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["channel", "start", "end", "length", "action"])?;
    for r in records {
        w.write_record([
            r.channel.clone(),
            r.start.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            r.end.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            r.length.to_string(),
            r.action.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Downsample to a coarser resolution. Each output cell aggregates the
/// source cells in its bucket with the channel's rule (mean for sensor
/// and weather, sum for yield). All-missing buckets stay missing;
/// partially missing buckets aggregate the present values.
pub fn resample(frame: &TimeSeriesFrame, target: Resolution) -> Result<TimeSeriesFrame> {
    if frame.is_empty() {
        return Err(Error::EmptyFrame);
    }
    if !target.is_coarser_than(frame.resolution()) {
        return Err(Error::UpsampleRequested {
            from: frame.resolution().to_string(),
            to: target.to_string(),
        });
    }
    // Bucket row indices by target bucket start; BTreeMap keeps output order.
    let mut buckets: BTreeMap<DateTime<Utc>, Vec<usize>> = BTreeMap::new();
    for (i, ts) in frame.timestamps().iter().enumerate() {
        buckets.entry(target.bucket_start(*ts)).or_default().push(i);
    }
    let starts: Vec<DateTime<Utc>> = buckets.keys().copied().collect();
    let mut values = Vec::with_capacity(frame.channels().len());
    for (ci, spec) in frame.channels().iter().enumerate() {
        let src = frame.values_by_index(ci);
        let col = buckets
            .values()
            .map(|rows| {
                let present: Vec<f64> = rows.iter().filter_map(|&r| src[r]).collect();
                if present.is_empty() {
                    None
                } else {
                    let sum: f64 = present.iter().sum();
                    Some(match spec.aggregation {
                        Aggregation::Sum => sum,
                        Aggregation::Mean => sum / present.len() as f64,
                    })
                }
            })
            .collect();
        values.push(col);
    }
    TimeSeriesFrame::new(
        frame.site(),
        frame.season(),
        target,
        starts,
        frame.channels().to_vec(),
        values,
    )
}

/// Last observation carried forward, bounded by `max_gap` steps. Leading
/// gaps and over-long runs are left missing; every gap is reported.
pub fn fill_locf(
    frame: &TimeSeriesFrame,
    channels: &[String],
    max_gap: usize,
) -> Result<(TimeSeriesFrame, Vec<GapRecord>)> {
    let mut out = frame.clone();
    let mut report = Vec::new();
    for name in channels {
        let vals = frame.values(name)?.to_vec();
        let mut filled = vals.clone();
        let ts = frame.timestamps();
        let mut i = 0;
        while i < vals.len() {
            if vals[i].is_some() {
                i += 1;
                continue;
            }
            let start = i;
            while i < vals.len() && vals[i].is_none() {
                i += 1;
            }
            let len = i - start;
            let action = if start == 0 {
                "unfilled-leading"
            } else if len > max_gap {
                "unfilled-too-long"
            } else {
                let carry = filled[start - 1];
                for cell in filled.iter_mut().take(start + len).skip(start) {
                    *cell = carry;
                }
                "locf"
            };
            report.push(GapRecord {
                channel: name.clone(),
                start: ts[start],
                end: ts[start + len - 1],
                length: len,
                action: action.to_string(),
            });
        }
        out = out.with_values(name, filled)?;
    }
    Ok((out, report))
}

/// Copy missing cells of one channel from an aligned donor frame
/// (a nearby tunnel with similar exposure). Returns the fill count.
pub fn fill_from_paired_site(
    frame: &TimeSeriesFrame,
    channel: &str,
    donor: &TimeSeriesFrame,
) -> Result<(TimeSeriesFrame, usize)> {
    if donor.resolution() != frame.resolution() {
        return Err(Error::ResolutionMismatch(
            frame.resolution().to_string(),
            donor.resolution().to_string(),
        ));
    }
    let donor_vals = donor.values(channel)?;
    let donor_ts = donor.timestamps();
    let mut vals = frame.values(channel)?.to_vec();
    let mut filled = 0usize;
    let step = frame.resolution().step_seconds();
    for (i, ts) in frame.timestamps().iter().enumerate() {
        if vals[i].is_some() {
            continue;
        }
        let offset = ts.timestamp() - donor_ts[0].timestamp();
        if offset < 0 || offset % step != 0 {
            continue;
        }
        let j = (offset / step) as usize;
        if let Some(Some(v)) = donor_vals.get(j) {
            vals[i] = Some(*v);
            filled += 1;
        }
    }
    Ok((frame.with_values(channel, vals)?, filled))
}

/// Per-timestamp mean of a channel across replicate frames; missing only
/// when all replicates are missing. Output keeps the first frame's shape.
pub fn average_replicates(frames: &[&TimeSeriesFrame], channel: &str) -> Result<TimeSeriesFrame> {
    let first = *frames.first().ok_or(Error::EmptyInput)?;
    let mut columns = Vec::with_capacity(frames.len());
    for f in frames {
        if f.timestamps() != first.timestamps() {
            return Err(Error::InvalidFrame(
                "replicate frames must share timestamps".into(),
            ));
        }
        columns.push(f.values(channel)?);
    }
    let averaged: Vec<Option<f64>> = (0..first.len())
        .map(|row| {
            let present: Vec<f64> = columns.iter().filter_map(|c| c[row]).collect();
            if present.is_empty() {
                None
            } else {
                Some(present.iter().sum::<f64>() / present.len() as f64)
            }
        })
        .collect();
    first.with_values(channel, averaged)
}

/// Replace channels `a` and `b` with their elementwise mean under a new
/// acronym; where one side is missing the present side passes through.
pub fn merge_redundant_pair(
    frame: &TimeSeriesFrame,
    a: &str,
    b: &str,
    out: &str,
) -> Result<TimeSeriesFrame> {
    let spec_a = frame.channel(a)?.clone();
    let spec_b = frame.channel(b)?;
    if spec_a.unit != spec_b.unit {
        return Err(Error::UnitMismatch(
            a.into(),
            spec_a.unit.clone(),
            b.into(),
            spec_b.unit.clone(),
        ));
    }
    let va = frame.values(a)?;
    let vb = frame.values(b)?;
    let merged: Vec<Option<f64>> = va
        .iter()
        .zip(vb)
        .map(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => Some((x + y) / 2.0),
            (Some(x), None) => Some(*x),
            (None, Some(y)) => Some(*y),
            (None, None) => None,
        })
        .collect();
    let mut spec = spec_a;
    spec.acronym = out.to_string();
    frame
        .drop_channels(&[a.to_string(), b.to_string()])
        .with_channel(spec, merged)
}

/// Add one constant indicator channel per vocabulary entry, 1.0 for the
/// frame's site and 0.0 otherwise.
pub fn one_hot_site(frame: &TimeSeriesFrame, vocabulary: &[String]) -> Result<TimeSeriesFrame> {
    if !vocabulary.iter().any(|v| v == frame.site()) {
        return Err(Error::UnknownSite(frame.site().to_string()));
    }
    let mut out = frame.clone();
    for site in vocabulary {
        let value = if site == frame.site() { 1.0 } else { 0.0 };
        let spec = ChannelSpec::new(format!("site_{site}"), "", ChannelKind::Encoded, None)?;
        out = out.with_channel(spec, vec![Some(value); frame.len()])?;
    }
    Ok(out)
}

/// Per-key (min, max) fitted on a designated set, mapped linearly onto
/// [a1, a2]. Keys are channel acronyms (or feature column names when
/// fitted on a windowed dataset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub bounds: BTreeMap<String, (f64, f64)>,
    pub a1: f64,
    pub a2: f64,
    /// Which frame or split the extrema were computed from.
    pub fitted_on: String,
}

impl NormalizationSpec {
    pub fn from_columns<'a>(
        columns: impl Iterator<Item = (&'a str, &'a [f64])>,
        a1: f64,
        a2: f64,
        fitted_on: &str,
    ) -> Result<NormalizationSpec> {
        if a1 >= a2 {
            return Err(Error::InvalidParams(format!("a1 {a1} must be < a2 {a2}")));
        }
        let mut bounds = BTreeMap::new();
        for (name, vals) in columns {
            if vals.is_empty() {
                return Err(Error::AllMissing(name.to_string()));
            }
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            bounds.insert(name.to_string(), (min, max));
        }
        Ok(NormalizationSpec {
            bounds,
            a1,
            a2,
            fitted_on: fitted_on.to_string(),
        })
    }

    /// x' = (a2 - a1)(x - min)/(max - min) + a1. Constant keys map to the
    /// interval midpoint; values outside the fitted extrema follow the
    /// same affine formula and may leave [a1, a2].
    pub fn transform(&self, key: &str, x: f64) -> Result<f64> {
        let (min, max) = self
            .bounds
            .get(key)
            .copied()
            .ok_or_else(|| Error::NotInSpec(key.to_string()))?;
        if min == max {
            return Ok((self.a1 + self.a2) / 2.0);
        }
        Ok((self.a2 - self.a1) * (x - min) / (max - min) + self.a1)
    }

    pub fn invert(&self, key: &str, y: f64) -> Result<f64> {
        let (min, max) = self
            .bounds
            .get(key)
            .copied()
            .ok_or_else(|| Error::NotInSpec(key.to_string()))?;
        if min == max {
            return Err(Error::DegenerateChannel(key.to_string()));
        }
        Ok((y - self.a1) / (self.a2 - self.a1) * (max - min) + min)
    }
}

/// Fit per-channel extrema over non-missing values of the frame.
pub fn fit_normalizer(
    frame: &TimeSeriesFrame,
    channels: &[String],
    a1: f64,
    a2: f64,
) -> Result<NormalizationSpec> {
    let mut columns = Vec::new();
    for name in channels {
        let present: Vec<f64> = frame.values(name)?.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::AllMissing(name.clone()));
        }
        columns.push((name.clone(), present));
    }
    NormalizationSpec::from_columns(
        columns.iter().map(|(n, v)| (n.as_str(), v.as_slice())),
        a1,
        a2,
        &format!("{}/{}", frame.site(), frame.season()),
    )
}

pub fn apply_normalizer(spec: &NormalizationSpec, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
    let mut out = frame.clone();
    for key in spec.bounds.keys() {
        let vals = frame
            .values(key)?
            .iter()
            .map(|v| v.map(|x| spec.transform(key, x)).transpose())
            .collect::<Result<Vec<_>>>()?;
        out = out.with_values(key, vals)?;
    }
    Ok(out)
}

pub fn invert_normalizer(spec: &NormalizationSpec, frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
    let mut out = frame.clone();
    for key in spec.bounds.keys() {
        let vals = frame
            .values(key)?
            .iter()
            .map(|v| v.map(|y| spec.invert(key, y)).transpose())
            .collect::<Result<Vec<_>>>()?;
        out = out.with_values(key, vals)?;
    }
    Ok(out)
}

/// Snap jittered raw rows to the resolution grid before frame
/// construction; rows that collide on the same grid point are averaged
/// per column, and absent grid points become missing.
pub fn snap_to_grid(
    rows: &[(DateTime<Utc>, Vec<Option<f64>>)],
    n_columns: usize,
    resolution: Resolution,
) -> Vec<(DateTime<Utc>, Vec<Option<f64>>)> {
    let step = resolution.step_seconds();
    let mut grid: BTreeMap<i64, Vec<Vec<f64>>> = BTreeMap::new();
    for (ts, vals) in rows {
        let secs = ts.timestamp();
        let snapped = (secs as f64 / step as f64).round() as i64 * step;
        let slot = grid.entry(snapped).or_insert_with(|| vec![Vec::new(); n_columns]);
        for (c, v) in vals.iter().enumerate() {
            if let Some(v) = v {
                slot[c].push(*v);
            }
        }
    }
    let (first, last) = match (grid.keys().next(), grid.keys().last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Vec::new(),
    };
    let mut out = Vec::new();
    let mut t = first;
    while t <= last {
        let vals = match grid.get(&t) {
            Some(slot) => slot
                .iter()
                .map(|col| {
                    if col.is_empty() {
                        None
                    } else {
                        Some(col.iter().sum::<f64>() / col.len() as f64)
                    }
                })
                .collect(),
            None => vec![None; n_columns],
        };
        out.push((chrono::TimeZone::timestamp_opt(&Utc, t, 0).unwrap(), vals));
        t += step;
    }
    out
}
