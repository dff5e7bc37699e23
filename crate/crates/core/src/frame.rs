//! Shared domain types: channels, resolutions, and the timestamped
//! multi-channel frame every other module consumes.
//!
//! Frames are immutable after construction; transformations produce new
//! frames. Missing values are an explicit `None`, never a magic number,
//! so a 0-valued rainfall cell is never confused with a gap.

use std::fmt;

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sampling cadence of a frame. All timestamps are UTC, so daily and
/// weekly steps are exact multiples of 86400 seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resolution {
    #[serde(rename = "20min")]
    TwentyMin,
    #[serde(rename = "hourly")]
    Hourly,
    #[serde(rename = "daily")]
    Daily,
    #[serde(rename = "weekly")]
    Weekly,
}

impl Resolution {
    pub fn step_seconds(self) -> i64 {
        match self {
            Resolution::TwentyMin => 20 * 60,
            Resolution::Hourly => 3600,
            Resolution::Daily => 86_400,
            Resolution::Weekly => 7 * 86_400,
        }
    }

    pub fn is_coarser_than(self, other: Resolution) -> bool {
        self.step_seconds() > other.step_seconds()
    }

    /// Start of the bucket containing `ts`. Weekly buckets start on
    /// Monday 00:00 UTC; others floor to the step grid.
    pub fn bucket_start(self, ts: DateTime<Utc>) -> DateTime<Utc> {
        let secs = ts.timestamp();
        let start = match self {
            Resolution::Weekly => {
                let days = secs.div_euclid(86_400);
                // 1970-01-01 was a Thursday; shift so Monday is day 0.
                let monday_offset = (days + 3).rem_euclid(7);
                (days - monday_offset) * 86_400
            }
            _ => secs - secs.rem_euclid(self.step_seconds()),
        };
        Utc.timestamp_opt(start, 0).unwrap()
    }

    pub fn parse(s: &str) -> Result<Resolution> {
        match s {
            "20min" => Ok(Resolution::TwentyMin),
            "hourly" => Ok(Resolution::Hourly),
            "daily" => Ok(Resolution::Daily),
            "weekly" => Ok(Resolution::Weekly),
            other => Err(Error::Config {
                field: "resolution".into(),
                message: format!("unknown resolution `{other}`"),
            }),
        }
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Resolution::TwentyMin => "20min",
            Resolution::Hourly => "hourly",
            Resolution::Daily => "daily",
            Resolution::Weekly => "weekly",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Sensor,
    Weather,
    Yield,
    Encoded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Sum,
}

/// Per-channel metadata: acronym, unit, kind, downsampling rule, and an
/// optional closed valid range for glitch reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub acronym: String,
    pub unit: String,
    pub kind: ChannelKind,
    pub aggregation: Aggregation,
    pub valid_range: Option<(f64, f64)>,
}

impl ChannelSpec {
    pub fn new(
        acronym: impl Into<String>,
        unit: impl Into<String>,
        kind: ChannelKind,
        valid_range: Option<(f64, f64)>,
    ) -> Result<ChannelSpec> {
        // Yield channels sum when downsampled; everything else averages.
        let aggregation = match kind {
            ChannelKind::Yield => Aggregation::Sum,
            _ => Aggregation::Mean,
        };
        if let Some((lo, hi)) = valid_range {
            if lo > hi {
                return Err(Error::InvalidFrame(format!(
                    "valid_range for `{}` has lower > upper",
                    acronym.into()
                )));
            }
        }
        Ok(ChannelSpec {
            acronym: acronym.into(),
            unit: unit.into(),
            kind,
            aggregation,
            valid_range,
        })
    }
}

/// Known channels, looked up by acronym during ingest and derivation.
#[derive(Debug, Clone, Default)]
pub struct ChannelRegistry {
    specs: Vec<ChannelSpec>,
}

impl ChannelRegistry {
    pub fn new() -> ChannelRegistry {
        ChannelRegistry { specs: Vec::new() }
    }

    /// The full sensor + weather + yield feature list, with units.
    pub fn standard() -> ChannelRegistry {
        let mut r = ChannelRegistry::new();
        let sensor = ChannelKind::Sensor;
        let weather = ChannelKind::Weather;
        let entries: &[(&str, &str, ChannelKind, Option<(f64, f64)>)] = &[
            ("WU", "Litres", sensor, None),
            ("IT", "°C", sensor, Some((-40.0, 70.0))),
            ("IH", "%", sensor, Some((0.0, 100.0))),
            ("PET", "°C", sensor, Some((-40.0, 70.0))),
            ("PEH", "%", sensor, Some((0.0, 100.0))),
            ("SM", "%", sensor, Some((0.0, 100.0))),
            ("ST", "°C", sensor, Some((-40.0, 70.0))),
            ("PAR", "µmol m⁻² s⁻¹", sensor, None),
            ("MET", "°C", weather, Some((-40.0, 70.0))),
            ("Vis", "dm", weather, None),
            ("Pre", "hPa", weather, Some((850.0, 1100.0))),
            ("MEH", "%", weather, Some((0.0, 100.0))),
            ("Rad", "KJ/m2", weather, None),
            ("WS", "Kn", weather, None),
            ("WD", "degrees", weather, Some((0.0, 360.0))),
            ("WG", "Kn", weather, None),
            ("RFA", "mm", weather, None),
            ("Yield", "Kg/m", ChannelKind::Yield, None),
        ];
        for (acr, unit, kind, range) in entries {
            r.insert(ChannelSpec::new(*acr, *unit, *kind, *range).unwrap())
                .unwrap();
        }
        r
    }

    pub fn insert(&mut self, spec: ChannelSpec) -> Result<()> {
        if self.get(&spec.acronym).is_some() {
            return Err(Error::DuplicateChannel(spec.acronym));
        }
        self.specs.push(spec);
        Ok(())
    }

    pub fn get(&self, acronym: &str) -> Option<&ChannelSpec> {
        self.specs.iter().find(|s| s.acronym == acronym)
    }

    pub fn specs(&self) -> &[ChannelSpec] {
        &self.specs
    }
}

/// One out-of-range observation, reported rather than clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeViolation {
    pub row: usize,
    pub channel: String,
    pub value: f64,
    pub range: (f64, f64),
}

/// Uniformly indexed multi-channel series at a declared resolution,
/// tagged with its site and growing season.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    site: String,
    season: i32,
    resolution: Resolution,
    timestamps: Vec<DateTime<Utc>>,
    channels: Vec<ChannelSpec>,
    values: Vec<Vec<Option<f64>>>,
}

impl TimeSeriesFrame {
    pub fn new(
        site: impl Into<String>,
        season: i32,
        resolution: Resolution,
        timestamps: Vec<DateTime<Utc>>,
        channels: Vec<ChannelSpec>,
        values: Vec<Vec<Option<f64>>>,
    ) -> Result<TimeSeriesFrame> {
        let frame = TimeSeriesFrame {
            site: site.into(),
            season,
            resolution,
            timestamps,
            channels,
            values,
        };
        frame.validate()?;
        Ok(frame)
    }

    /// Structural invariants: aligned lengths, unique acronyms, strictly
    /// increasing timestamps on the exact resolution grid. Run at every
    /// pipeline stage boundary.
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != self.values.len() {
            return Err(Error::InvalidFrame(format!(
                "{} channel specs but {} value columns",
                self.channels.len(),
                self.values.len()
            )));
        }
        for (spec, vals) in self.channels.iter().zip(&self.values) {
            if vals.len() != self.timestamps.len() {
                return Err(Error::InvalidFrame(format!(
                    "channel `{}` has {} values for {} timestamps",
                    spec.acronym,
                    vals.len(),
                    self.timestamps.len()
                )));
            }
        }
        for i in 0..self.channels.len() {
            for j in (i + 1)..self.channels.len() {
                if self.channels[i].acronym == self.channels[j].acronym {
                    return Err(Error::DuplicateChannel(self.channels[i].acronym.clone()));
                }
            }
        }
        let step = self.resolution.step_seconds();
        for w in self.timestamps.windows(2) {
            let dt = w[1].timestamp() - w[0].timestamp();
            if dt != step {
                return Err(Error::InvalidFrame(format!(
                    "timestamp step {}s at {} (expected {}s)",
                    dt, w[0], step
                )));
            }
        }
        Ok(())
    }

    /// Out-of-range non-missing values, reported for the cleaning stage.
    pub fn range_violations(&self) -> Vec<RangeViolation> {
        let mut out = Vec::new();
        for (spec, vals) in self.channels.iter().zip(&self.values) {
            let Some((lo, hi)) = spec.valid_range else {
                continue;
            };
            for (row, v) in vals.iter().enumerate() {
                if let Some(v) = v {
                    if *v < lo || *v > hi {
                        out.push(RangeViolation {
                            row,
                            channel: spec.acronym.clone(),
                            value: *v,
                            range: (lo, hi),
                        });
                    }
                }
            }
        }
        out
    }

    pub fn site(&self) -> &str {
        &self.site
    }

    pub fn season(&self) -> i32 {
        self.season
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn timestamps(&self) -> &[DateTime<Utc>] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn channels(&self) -> &[ChannelSpec] {
        &self.channels
    }

    pub fn channel_index(&self, acronym: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.acronym == acronym)
    }

    pub fn channel(&self, acronym: &str) -> Result<&ChannelSpec> {
        self.channel_index(acronym)
            .map(|i| &self.channels[i])
            .ok_or_else(|| Error::ChannelNotFound(acronym.into()))
    }

    pub fn values(&self, acronym: &str) -> Result<&[Option<f64>]> {
        self.channel_index(acronym)
            .map(|i| self.values[i].as_slice())
            .ok_or_else(|| Error::ChannelNotFound(acronym.into()))
    }

    pub fn values_by_index(&self, index: usize) -> &[Option<f64>] {
        &self.values[index]
    }

    /// New frame with one channel's values replaced.
    pub fn with_values(&self, acronym: &str, vals: Vec<Option<f64>>) -> Result<TimeSeriesFrame> {
        let idx = self
            .channel_index(acronym)
            .ok_or_else(|| Error::ChannelNotFound(acronym.into()))?;
        if vals.len() != self.len() {
            return Err(Error::LengthMismatch(vals.len(), self.len()));
        }
        let mut out = self.clone();
        out.values[idx] = vals;
        Ok(out)
    }

    /// New frame with a channel appended.
    pub fn with_channel(&self, spec: ChannelSpec, vals: Vec<Option<f64>>) -> Result<TimeSeriesFrame> {
        if self.channel_index(&spec.acronym).is_some() {
            return Err(Error::DuplicateChannel(spec.acronym));
        }
        if vals.len() != self.len() {
            return Err(Error::LengthMismatch(vals.len(), self.len()));
        }
        let mut out = self.clone();
        out.channels.push(spec);
        out.values.push(vals);
        Ok(out)
    }

    /// New frame keeping only the named channels, in the given order.
    pub fn select_channels(&self, acronyms: &[String]) -> Result<TimeSeriesFrame> {
        let mut channels = Vec::with_capacity(acronyms.len());
        let mut values = Vec::with_capacity(acronyms.len());
        for a in acronyms {
            let idx = self
                .channel_index(a)
                .ok_or_else(|| Error::ChannelNotFound(a.clone()))?;
            channels.push(self.channels[idx].clone());
            values.push(self.values[idx].clone());
        }
        TimeSeriesFrame::new(
            self.site.clone(),
            self.season,
            self.resolution,
            self.timestamps.clone(),
            channels,
            values,
        )
    }

    /// New frame without the named channels.
    pub fn drop_channels(&self, acronyms: &[String]) -> TimeSeriesFrame {
        let keep: Vec<usize> = (0..self.channels.len())
            .filter(|&i| !acronyms.iter().any(|a| *a == self.channels[i].acronym))
            .collect();
        TimeSeriesFrame {
            site: self.site.clone(),
            season: self.season,
            resolution: self.resolution,
            timestamps: self.timestamps.clone(),
            channels: keep.iter().map(|&i| self.channels[i].clone()).collect(),
            values: keep.iter().map(|&i| self.values[i].clone()).collect(),
        }
    }
}

/// Combine frames sharing (site, season, resolution) into one frame with
/// the union of channels on the intersection of timestamps. Channel order
/// is input order, then channel order within each frame.
pub fn join_frames(frames: &[&TimeSeriesFrame]) -> Result<TimeSeriesFrame> {
    let first = *frames.first().ok_or(Error::EmptyInput)?;
    for f in &frames[1..] {
        if f.resolution != first.resolution {
            return Err(Error::ResolutionMismatch(
                first.resolution.to_string(),
                f.resolution.to_string(),
            ));
        }
        if f.site != first.site || f.season != first.season {
            return Err(Error::SiteMismatch(
                format!("{}/{}", first.site, first.season),
                format!("{}/{}", f.site, f.season),
            ));
        }
    }
    // Intersection of regular grids: [max(starts), min(ends)].
    let start = frames.iter().map(|f| f.timestamps[0]).max().unwrap();
    let end = frames
        .iter()
        .map(|f| *f.timestamps.last().unwrap())
        .min()
        .unwrap();
    if start > end {
        return Err(Error::EmptyIntersection);
    }
    let step = first.resolution.step_seconds();
    let n = ((end.timestamp() - start.timestamp()) / step) as usize + 1;

    let mut channels = Vec::new();
    let mut values: Vec<Vec<Option<f64>>> = Vec::new();
    for f in frames {
        let offset = ((start.timestamp() - f.timestamps[0].timestamp()) / step) as usize;
        for (spec, vals) in f.channels.iter().zip(&f.values) {
            if channels.iter().any(|c: &ChannelSpec| c.acronym == spec.acronym) {
                return Err(Error::DuplicateChannel(spec.acronym.clone()));
            }
            channels.push(spec.clone());
            values.push(vals[offset..offset + n].to_vec());
        }
    }
    let timestamps = frames[0]
        .timestamps
        .iter()
        .copied()
        .filter(|t| *t >= start && *t <= end)
        .collect();
    TimeSeriesFrame::new(
        first.site.clone(),
        first.season,
        first.resolution,
        timestamps,
        channels,
        values,
    )
}

/// Rows with start <= t <= end; channels unchanged.
pub fn slice_season(
    frame: &TimeSeriesFrame,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
) -> Result<TimeSeriesFrame> {
    if start >= end {
        return Err(Error::InvalidFrame(format!(
            "slice start {start} not before end {end}"
        )));
    }
    let idx: Vec<usize> = frame
        .timestamps
        .iter()
        .enumerate()
        .filter(|(_, t)| **t >= start && **t <= end)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::EmptySlice {
            start: start.to_rfc3339(),
            end: end.to_rfc3339(),
        });
    }
    let lo = idx[0];
    let hi = *idx.last().unwrap();
    TimeSeriesFrame::new(
        frame.site.clone(),
        frame.season,
        frame.resolution,
        frame.timestamps[lo..=hi].to_vec(),
        frame.channels.clone(),
        frame.values.iter().map(|v| v[lo..=hi].to_vec()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ts(hours: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2023, 5, 1, 0, 0, 0).unwrap() + chrono::Duration::hours(hours)
    }

    pub(crate) fn hourly_frame(
        site: &str,
        start_hour: i64,
        channels: &[(&str, Vec<Option<f64>>)],
    ) -> TimeSeriesFrame {
        let n = channels[0].1.len();
        let timestamps = (0..n as i64).map(|i| ts(start_hour + i)).collect();
        let specs = channels
            .iter()
            .map(|(a, _)| ChannelSpec::new(*a, "u", ChannelKind::Sensor, None).unwrap())
            .collect();
        let values = channels.iter().map(|(_, v)| v.clone()).collect();
        TimeSeriesFrame::new(site, 2023, Resolution::Hourly, timestamps, specs, values).unwrap()
    }

    #[test]
    fn join_intersects_timestamps() {
        let a = hourly_frame("M", 0, &[("MET", vec![Some(1.0); 4])]);
        let b = hourly_frame("M", 1, &[("IT", vec![Some(2.0); 4])]);
        let joined = join_frames(&[&a, &b]).unwrap();
        assert_eq!(joined.len(), 3);
        assert_eq!(joined.timestamps()[0], ts(1));
        assert_eq!(
            joined
                .channels()
                .iter()
                .map(|c| c.acronym.as_str())
                .collect::<Vec<_>>(),
            vec!["MET", "IT"]
        );
    }

    #[test]
    fn join_rejects_duplicate_channel() {
        let a = hourly_frame("M", 0, &[("MET", vec![Some(1.0); 4])]);
        let err = join_frames(&[&a, &a]).unwrap_err();
        assert!(matches!(err, Error::DuplicateChannel(_)));
    }

    #[test]
    fn join_rejects_resolution_mismatch() {
        let a = hourly_frame("M", 0, &[("MET", vec![Some(1.0); 4])]);
        let timestamps = (0..3).map(|i| ts(i * 24)).collect();
        let b = TimeSeriesFrame::new(
            "M",
            2023,
            Resolution::Daily,
            timestamps,
            vec![ChannelSpec::new("IT", "°C", ChannelKind::Sensor, None).unwrap()],
            vec![vec![Some(0.0); 3]],
        )
        .unwrap();
        assert!(matches!(
            join_frames(&[&a, &b]),
            Err(Error::ResolutionMismatch(_, _))
        ));
    }

    #[test]
    fn join_rejects_disjoint_ranges() {
        let a = hourly_frame("M", 0, &[("MET", vec![Some(1.0); 3])]);
        let b = hourly_frame("M", 10, &[("IT", vec![Some(2.0); 3])]);
        assert!(matches!(join_frames(&[&a, &b]), Err(Error::EmptyIntersection)));
    }

    #[test]
    fn join_is_associative_on_values() {
        let a = hourly_frame("M", 0, &[("A", (0..6).map(|i| Some(i as f64)).collect())]);
        let b = hourly_frame("M", 1, &[("B", (0..6).map(|i| Some(i as f64 * 2.0)).collect())]);
        let c = hourly_frame("M", 2, &[("C", (0..6).map(|i| Some(i as f64 * 3.0)).collect())]);
        let left = join_frames(&[&join_frames(&[&a, &b]).unwrap(), &c]).unwrap();
        let right = join_frames(&[&a, &join_frames(&[&b, &c]).unwrap()]).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn slice_selects_inclusive_rows() {
        let f = hourly_frame("M", 0, &[("MET", (0..10).map(|i| Some(i as f64)).collect())]);
        let s = slice_season(&f, ts(2), ts(6)).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s.values("MET").unwrap()[0], Some(2.0));
    }

    #[test]
    fn slice_full_range_is_identity() {
        let f = hourly_frame("M", 0, &[("MET", (0..10).map(|i| Some(i as f64)).collect())]);
        let s = slice_season(&f, ts(0), ts(9)).unwrap();
        assert_eq!(s, f);
    }

    #[test]
    fn slice_outside_range_errors() {
        let f = hourly_frame("M", 0, &[("MET", vec![Some(0.0); 5])]);
        assert!(matches!(
            slice_season(&f, ts(100), ts(200)),
            Err(Error::EmptySlice { .. })
        ));
    }

    #[test]
    fn nested_slices_collapse() {
        let f = hourly_frame("M", 0, &[("MET", (0..20).map(|i| Some(i as f64)).collect())]);
        let outer = slice_season(&f, ts(2), ts(15)).unwrap();
        let inner = slice_season(&outer, ts(5), ts(10)).unwrap();
        let direct = slice_season(&f, ts(5), ts(10)).unwrap();
        assert_eq!(inner, direct);
    }

    #[test]
    fn irregular_timestamps_rejected() {
        let mut timestamps: Vec<DateTime<Utc>> = (0..4).map(ts).collect();
        timestamps[2] = ts(5);
        let r = TimeSeriesFrame::new(
            "M",
            2023,
            Resolution::Hourly,
            timestamps,
            vec![ChannelSpec::new("MET", "°C", ChannelKind::Weather, None).unwrap()],
            vec![vec![Some(0.0); 4]],
        );
        assert!(r.is_err());
    }

    #[test]
    fn range_violations_reported_not_clamped() {
        let f = TimeSeriesFrame::new(
            "M",
            2023,
            Resolution::Hourly,
            (0..3).map(ts).collect(),
            vec![ChannelSpec::new("IH", "%", ChannelKind::Sensor, Some((0.0, 100.0))).unwrap()],
            vec![vec![Some(50.0), Some(120.0), None]],
        )
        .unwrap();
        let v = f.range_violations();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].row, 1);
        assert_eq!(f.values("IH").unwrap()[1], Some(120.0));
    }

    #[test]
    fn weekly_bucket_starts_monday() {
        // 2023-05-03 is a Wednesday; its week starts Monday 2023-05-01.
        let wed = Utc.with_ymd_and_hms(2023, 5, 3, 15, 0, 0).unwrap();
        let monday = Utc.with_ymd_and_hms(2023, 5, 1, 0, 0, 0).unwrap();
        assert_eq!(Resolution::Weekly.bucket_start(wed), monday);
        assert_eq!(Resolution::Weekly.bucket_start(monday), monday);
    }
}
