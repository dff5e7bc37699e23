//! Supervised dataset construction: forward forecast windows, backcast
//! windows over future exogenous readings, weekly yield triples, and the
//! two split strategies.

use std::path::Path;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{Resolution, TimeSeriesFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

/// Window layout. `horizon` 0 is permitted for concurrent regression
/// (features at the anchor predict the anchor) and for the time-reversal
/// duality with backcast windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub direction: Direction,
    pub lookback: usize,
    pub horizon: usize,
    pub input_channels: Vec<String>,
    pub target: String,
    pub include_target_history: bool,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels.is_empty() && !self.include_target_history {
            return Err(Error::InvalidWindow(
                "no input channels and target history disabled".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub site: String,
    pub season: i32,
    pub anchor: DateTime<Utc>,
    /// True when any feature of this row came from a generated frame.
    pub synthetic: bool,
}

/// Flattened supervised matrix with named lag columns and per-row
/// provenance. Rows containing a missing feature or target are dropped
/// during construction and counted in `dropped_rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub feature_names: Vec<String>,
    pub target_name: String,
    pub features: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub provenance: Vec<Provenance>,
    pub dropped_rows: usize,
    /// Human-readable window layout (direction, lookback, horizon).
    pub layout: String,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> WindowedDataset {
        WindowedDataset {
            feature_names: self.feature_names.clone(),
            target_name: self.target_name.clone(),
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i].clone()).collect(),
            dropped_rows: 0,
            layout: self.layout.clone(),
        }
    }

    /// Append rows of another dataset with an identical schema.
    pub fn concat(&mut self, other: &WindowedDataset) -> Result<()> {
        if other.feature_names != self.feature_names || other.target_name != self.target_name {
            return Err(Error::SchemaMismatch {
                expected: self.feature_names.clone(),
                got: other.feature_names.clone(),
            });
        }
        self.features.extend(other.features.iter().cloned());
        self.targets.extend(other.targets.iter().copied());
        self.provenance.extend(other.provenance.iter().cloned());
        self.dropped_rows += other.dropped_rows;
        Ok(())
    }

    /// Audit export: named lag columns, target, and provenance columns.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = vec![
            "site".into(),
            "season".into(),
            "anchor".into(),
            "synthetic".into(),
        ];
        header.extend(self.feature_names.clone());
        header.push(format!("target:{}", self.target_name));
        w.write_record(&header)?;
        for (row, prov) in self.provenance.iter().enumerate() {
            let mut record = vec![
                prov.site.clone(),
                prov.season.to_string(),
                prov.anchor.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
                prov.synthetic.to_string(),
            ];
            record.extend(self.features[row].iter().map(|v| format!("{v}")));
            record.push(format!("{}", self.targets[row]));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn offset_name(channel: &str, offset: i64) -> String {
    match offset.cmp(&0) {
        std::cmp::Ordering::Less => format!("{channel}@t-{}", -offset),
        std::cmp::Ordering::Equal => format!("{channel}@t"),
        std::cmp::Ordering::Greater => format!("{channel}@t+{offset}"),
    }
}

/// Shared extractor: one sample per anchor index, features taken at
/// (channel, signed offset) pairs, target at (channel, offset). Rows with
/// any missing cell are dropped and counted.
fn extract(
    frame: &TimeSeriesFrame,
    columns: &[(String, i64)],
    target: (&str, i64),
    anchors: impl Iterator<Item = i64>,
    synthetic: bool,
    layout: String,
) -> Result<WindowedDataset> {
    let feature_cols: Vec<(usize, i64)> = columns
        .iter()
        .map(|(c, o)| {
            frame
                .channel_index(c)
                .map(|i| (i, *o))
                .ok_or_else(|| Error::ChannelNotFound(c.clone()))
        })
        .collect::<Result<_>>()?;
    let target_idx = frame
        .channel_index(target.0)
        .ok_or_else(|| Error::ChannelNotFound(target.0.into()))?;

    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut provenance = Vec::new();
    let mut dropped = 0usize;
    for t in anchors {
        let mut row = Vec::with_capacity(feature_cols.len());
        let mut complete = true;
        for (ci, off) in &feature_cols {
            match frame.values_by_index(*ci)[(t + off) as usize] {
                Some(v) => row.push(v),
                None => {
                    complete = false;
                    break;
                }
            }
        }
        let y = frame.values_by_index(target_idx)[(t + target.1) as usize];
        match (complete, y) {
            (true, Some(y)) => {
                features.push(row);
                targets.push(y);
                provenance.push(Provenance {
                    site: frame.site().to_string(),
                    season: frame.season(),
                    anchor: frame.timestamps()[t as usize],
                    synthetic,
                });
            }
            _ => dropped += 1,
        }
    }
    Ok(WindowedDataset {
        feature_names: columns.iter().map(|(c, o)| offset_name(c, *o)).collect(),
        target_name: offset_name(target.0, target.1),
        features,
        targets,
        provenance,
        dropped_rows: dropped,
        layout,
    })
}

/// Forward windows: features are the input channels at t-L..t (plus the
/// target's own history when enabled), target at t+h. Sample count is
/// N - L - h on fully observed data.
pub fn build_forecast_windows(frame: &TimeSeriesFrame, spec: &WindowSpec) -> Result<WindowedDataset> {
    spec.validate()?;
    let n = frame.len() as i64;
    let lookback = spec.lookback as i64;
    let horizon = spec.horizon as i64;
    if n <= lookback + horizon {
        return Err(Error::FrameTooShort {
            len: frame.len(),
            need: spec.lookback + spec.horizon,
        });
    }
    let mut columns = Vec::new();
    for c in &spec.input_channels {
        for off in -lookback..=0 {
            columns.push((c.clone(), off));
        }
    }
    if spec.include_target_history {
        for off in -lookback..=0 {
            columns.push((spec.target.clone(), off));
        }
    }
    extract(
        frame,
        &columns,
        (&spec.target, horizon),
        lookback..=(n - 1 - horizon),
        false,
        format!("forward L={} h={}", spec.lookback, spec.horizon),
    )
}

/// Backcast windows: for each target channel, features are the exogenous
/// channels over the W consecutive readings starting at the anchor
/// (offsets W-1 down to 0), and the target is the target channel at the
/// anchor itself. Samples are emitted in descending chronological order,
/// which makes the dataset row-for-row identical to forecast windows
/// built on the time-reversed frame with L = W-1, h = 0. No sensor or
/// target channel ever appears among the features. Sample count is
/// N - W + 1 on fully observed data.
pub fn build_backcast_windows(
    frame: &TimeSeriesFrame,
    exogenous: &[String],
    targets: &[String],
    window: usize,
) -> Result<Vec<(String, WindowedDataset)>> {
    let overlap: Vec<String> = exogenous
        .iter()
        .filter(|e| targets.contains(e))
        .cloned()
        .collect();
    if !overlap.is_empty() {
        return Err(Error::ExogenousTargetOverlap(overlap));
    }
    if window == 0 {
        return Err(Error::InvalidWindow("backcast window must be >= 1".into()));
    }
    let n = frame.len() as i64;
    let w = window as i64;
    if n < w {
        return Err(Error::FrameTooShort {
            len: frame.len(),
            need: window - 1,
        });
    }
    let mut columns = Vec::new();
    for c in exogenous {
        for off in (0..w).rev() {
            columns.push((c.clone(), off));
        }
    }
    let mut out = Vec::with_capacity(targets.len());
    for target in targets {
        let ds = extract(
            frame,
            &columns,
            (target, 0),
            (0..=(n - w)).rev(),
            false,
            format!("backward W={window}"),
        )?;
        out.push((target.clone(), ds));
    }
    Ok(out)
}

/// Prediction-side counterpart of [`build_backcast_windows`]: feature
/// rows for every anchor with a complete exogenous window, in ascending
/// anchor order, with the same column layout the training datasets use.
/// Anchors past `n - window` lack future readings and are not emitted.
pub fn backcast_feature_rows(
    frame: &TimeSeriesFrame,
    exogenous: &[String],
    window: usize,
) -> Result<(Vec<String>, Vec<(usize, Vec<f64>)>)> {
    if window == 0 {
        return Err(Error::InvalidWindow("backcast window must be >= 1".into()));
    }
    let n = frame.len();
    if n < window {
        return Err(Error::FrameTooShort {
            len: n,
            need: window - 1,
        });
    }
    let mut names = Vec::new();
    let mut cols = Vec::new();
    for c in exogenous {
        let ci = frame
            .channel_index(c)
            .ok_or_else(|| Error::ChannelNotFound(c.clone()))?;
        for off in (0..window).rev() {
            names.push(offset_name(c, off as i64));
            cols.push((ci, off));
        }
    }
    let mut rows = Vec::new();
    for t in 0..=(n - window) {
        let mut row = Vec::with_capacity(cols.len());
        let mut complete = true;
        for (ci, off) in &cols {
            match frame.values_by_index(*ci)[t + off] {
                Some(v) => row.push(v),
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            rows.push((t, row));
        }
    }
    Ok((names, rows))
}

/// Weekly yield windows over consecutive week triples (w, w+1, w+2):
/// env channels at all three weeks plus yield at the first two predict
/// yield at the third. One frame per (site, season) group, so samples
/// never span group boundaries. `synthetic` marks groups whose sensor
/// channels are generated.
pub fn build_yield_windows(
    groups: &[(&TimeSeriesFrame, bool)],
    env_channels: &[String],
    yield_channel: &str,
) -> Result<WindowedDataset> {
    let mut combined: Option<WindowedDataset> = None;
    for (frame, synthetic) in groups {
        if frame.resolution() != Resolution::Weekly {
            return Err(Error::ResolutionMismatch(
                Resolution::Weekly.to_string(),
                frame.resolution().to_string(),
            ));
        }
        if frame.len() < 3 {
            return Err(Error::FrameTooShort {
                len: frame.len(),
                need: 2,
            });
        }
        let mut columns = Vec::new();
        for c in env_channels {
            for off in -2..=0i64 {
                columns.push((c.clone(), off));
            }
        }
        for off in [-2i64, -1] {
            columns.push((yield_channel.to_string(), off));
        }
        let n = frame.len() as i64;
        // Anchor at the third week of the triple; target at offset 0.
        let ds = extract(
            frame,
            &columns,
            (yield_channel, 0),
            2..=(n - 1),
            *synthetic,
            "yield 3-week".to_string(),
        )?;
        match combined.as_mut() {
            Some(all) => all.concat(&ds)?,
            None => combined = Some(ds),
        }
    }
    combined.ok_or(Error::EmptyInput)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPolicy {
    Shuffled,
    Chronological,
}

/// Deterministic train/test partition at the given fraction. The train
/// side gets floor(n * fraction) rows, clamped so neither side is empty.
pub fn split_ratio(
    dataset: &WindowedDataset,
    train_fraction: f64,
    seed: u64,
    policy: SplitPolicy,
) -> Result<(WindowedDataset, WindowedDataset)> {
    let n = dataset.len();
    if n < 2 {
        return Err(Error::DegenerateSplit("test"));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidParams(format!(
            "train_fraction {train_fraction} outside [0, 1]"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    if policy == SplitPolicy::Shuffled {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
    }
    let train_n = ((n as f64 * train_fraction).floor() as usize).clamp(1, n - 1);
    Ok((
        dataset.subset(&indices[..train_n]),
        dataset.subset(&indices[train_n..]),
    ))
}

/// Hold out entire (site, season) groups as the test side.
pub fn split_leave_group_out(
    dataset: &WindowedDataset,
    held_out: &[(String, i32)],
) -> Result<(WindowedDataset, WindowedDataset)> {
    for (site, season) in held_out {
        if !dataset
            .provenance
            .iter()
            .any(|p| p.site == *site && p.season == *season)
        {
            return Err(Error::UnknownGroup(format!("{site}:{season}")));
        }
    }
    let is_held = |p: &Provenance| {
        held_out
            .iter()
            .any(|(site, season)| p.site == *site && p.season == *season)
    };
    let test: Vec<usize> = (0..dataset.len())
        .filter(|&i| is_held(&dataset.provenance[i]))
        .collect();
    let train: Vec<usize> = (0..dataset.len())
        .filter(|&i| !is_held(&dataset.provenance[i]))
        .collect();
    if test.is_empty() {
        return Err(Error::DegenerateSplit("test"));
    }
    if train.is_empty() {
        return Err(Error::DegenerateSplit("train"));
    }
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{frame_at, hourly_frame, present};

    fn spec(channels: &[&str], target: &str, lookback: usize, horizon: usize) -> WindowSpec {
        WindowSpec {
            direction: Direction::Forward,
            lookback,
            horizon,
            input_channels: channels.iter().map(|s| s.to_string()).collect(),
            target: target.to_string(),
            include_target_history: false,
        }
    }

    #[test]
    fn forecast_sample_count() {
        let f = hourly_frame(
            "M",
            0,
            &[
                ("MET", present(&(0..10).map(|i| i as f64).collect::<Vec<_>>())),
                ("IT", present(&(0..10).map(|i| i as f64 * 2.0).collect::<Vec<_>>())),
            ],
        );
        let ds = build_forecast_windows(&f, &spec(&["MET"], "IT", 2, 1)).unwrap();
        assert_eq!(ds.len(), 7);
        assert_eq!(ds.feature_names, vec!["MET@t-2", "MET@t-1", "MET@t"]);
        // First anchor t=2: features MET at 0,1,2; target IT at 3.
        assert_eq!(ds.features[0], vec![0.0, 1.0, 2.0]);
        assert_eq!(ds.targets[0], 6.0);
    }

    #[test]
    fn forecast_minimal_window() {
        let f = hourly_frame("M", 0, &[("MET", present(&[1.0, 2.0, 3.0])), ("IT", present(&[10.0, 20.0, 30.0]))]);
        let ds = build_forecast_windows(&f, &spec(&["MET"], "IT", 0, 1)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.features, vec![vec![1.0], vec![2.0]]);
        assert_eq!(ds.targets, vec![20.0, 30.0]);
    }

    #[test]
    fn forecast_too_short_errors() {
        let f = hourly_frame("M", 0, &[("MET", present(&(0..10).map(|i| i as f64).collect::<Vec<_>>()))]);
        assert!(matches!(
            build_forecast_windows(&f, &spec(&["MET"], "MET", 9, 1)),
            Err(Error::FrameTooShort { .. })
        ));
    }

    #[test]
    fn backcast_sample_count_and_features() {
        let f = hourly_frame(
            "M",
            0,
            &[
                ("MET", present(&(0..8).map(|i| i as f64).collect::<Vec<_>>())),
                ("IT", present(&(0..8).map(|i| 100.0 + i as f64).collect::<Vec<_>>())),
            ],
        );
        let sets = build_backcast_windows(&f, &["MET".into()], &["IT".into()], 6).unwrap();
        assert_eq!(sets.len(), 1);
        let ds = &sets[0].1;
        assert_eq!(ds.len(), 3);
        assert_eq!(
            ds.feature_names,
            vec!["MET@t+5", "MET@t+4", "MET@t+3", "MET@t+2", "MET@t+1", "MET@t"]
        );
        // Descending anchors: first sample is the latest anchor t=2.
        assert_eq!(ds.features[0], vec![7.0, 6.0, 5.0, 4.0, 3.0, 2.0]);
        assert_eq!(ds.targets[0], 102.0);
        // Last sample is anchor t=0: MET at 5,4,3,2,1,0; target IT at 0.
        assert_eq!(ds.features[2], vec![5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
        assert_eq!(ds.targets[2], 100.0);
    }

    #[test]
    fn backcast_degenerate_window_is_concurrent_regression() {
        let f = hourly_frame(
            "M",
            0,
            &[("MET", present(&[1.0, 2.0])), ("IT", present(&[10.0, 20.0]))],
        );
        let sets = build_backcast_windows(&f, &["MET".into()], &["IT".into()], 1).unwrap();
        let ds = &sets[0].1;
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_names, vec!["MET@t"]);
        // Anchors run backwards in time, matching the training-order
        // convention for backcast datasets.
        assert_eq!(ds.features, vec![vec![2.0], vec![1.0]]);
        assert_eq!(ds.targets, vec![20.0, 10.0]);
    }

    #[test]
    fn backcast_rejects_leaky_channel() {
        let f = hourly_frame(
            "M",
            0,
            &[("MET", present(&[1.0; 8])), ("IT", present(&[2.0; 8]))],
        );
        assert!(matches!(
            build_backcast_windows(&f, &["MET".into(), "IT".into()], &["IT".into()], 3),
            Err(Error::ExogenousTargetOverlap(_))
        ));
    }

    #[test]
    fn backcast_never_references_target_in_features() {
        let f = hourly_frame(
            "M",
            0,
            &[
                ("MET", present(&(0..12).map(|i| i as f64).collect::<Vec<_>>())),
                ("Rad", present(&(0..12).map(|i| i as f64).collect::<Vec<_>>())),
                ("IT", present(&(0..12).map(|i| i as f64).collect::<Vec<_>>())),
            ],
        );
        let sets =
            build_backcast_windows(&f, &["MET".into(), "Rad".into()], &["IT".into()], 6).unwrap();
        for name in &sets[0].1.feature_names {
            assert!(!name.starts_with("IT@"));
        }
    }

    #[test]
    fn backcast_equals_forecast_on_reversed_frame() {
        // Time-reversal duality: backcast windows on f equal forecast
        // windows (L = W-1, h = 0) on the reversed frame.
        let n = 14usize;
        let met: Vec<f64> = (0..n).map(|i| (i as f64).sin() * 3.0 + i as f64).collect();
        let it: Vec<f64> = (0..n).map(|i| (i as f64) * 0.5 - 2.0).collect();
        let f = hourly_frame("M", 0, &[("MET", present(&met)), ("IT", present(&it))]);
        let rev_met: Vec<f64> = met.iter().rev().copied().collect();
        let rev_it: Vec<f64> = it.iter().rev().copied().collect();
        let rev = hourly_frame("M", 0, &[("MET", present(&rev_met)), ("IT", present(&rev_it))]);

        let w = 6usize;
        let back = build_backcast_windows(&f, &["MET".into()], &["IT".into()], w).unwrap();
        let fwd = build_forecast_windows(&rev, &spec(&["MET"], "IT", w - 1, 0)).unwrap();
        let back_ds = &back[0].1;
        assert_eq!(back_ds.features, fwd.features);
        assert_eq!(back_ds.targets, fwd.targets);
    }

    #[test]
    fn dropped_plus_emitted_matches_formula() {
        let mut met = present(&(0..20).map(|i| i as f64).collect::<Vec<_>>());
        met[7] = None;
        let it = present(&(0..20).map(|i| i as f64).collect::<Vec<_>>());
        let f = hourly_frame("M", 0, &[("MET", met), ("IT", it)]);
        let sets = build_backcast_windows(&f, &["MET".into()], &["IT".into()], 6).unwrap();
        let ds = &sets[0].1;
        assert_eq!(ds.len() + ds.dropped_rows, 20 - 6 + 1);
        assert_eq!(ds.dropped_rows, 6);
    }

    fn weekly_yield_frame(site: &str, season: i32, weeks: usize) -> TimeSeriesFrame {
        let yields: Vec<f64> = (0..weeks).map(|i| i as f64 * 0.1).collect();
        let it: Vec<f64> = (0..weeks).map(|i| 15.0 + i as f64).collect();
        frame_at(
            site,
            season,
            Resolution::Weekly,
            0,
            &[("IT", present(&it)), ("Yield", present(&yields))],
        )
    }

    #[test]
    fn yield_windows_enumerate_triples() {
        let f = weekly_yield_frame("M", 2023, 5);
        let ds = build_yield_windows(&[(&f, false)], &["IT".into()], "Yield").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(
            ds.feature_names,
            vec!["IT@t-2", "IT@t-1", "IT@t", "Yield@t-2", "Yield@t-1"]
        );
        // First triple: IT weeks 0..2, yield weeks 0..1, target week 2.
        assert_eq!(ds.features[0], vec![15.0, 16.0, 17.0, 0.0, 0.1]);
        assert_eq!(ds.targets[0], 0.2);
    }

    #[test]
    fn yield_windows_support_empty_env_set() {
        let f = weekly_yield_frame("M", 2023, 4);
        let ds = build_yield_windows(&[(&f, false)], &[], "Yield").unwrap();
        assert_eq!(ds.feature_names, vec!["Yield@t-2", "Yield@t-1"]);
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn yield_windows_never_cross_groups() {
        let a = weekly_yield_frame("M", 2023, 5);
        let b = weekly_yield_frame("M", 2024, 5);
        let ds = build_yield_windows(&[(&a, false), (&b, false)], &["IT".into()], "Yield").unwrap();
        assert_eq!(ds.len(), 6);
        for p in &ds.provenance {
            assert!(p.season == 2023 || p.season == 2024);
        }
    }

    #[test]
    fn yield_windows_reject_short_groups() {
        let f = weekly_yield_frame("M", 2023, 2);
        assert!(matches!(
            build_yield_windows(&[(&f, false)], &[], "Yield"),
            Err(Error::FrameTooShort { .. })
        ));
    }

    fn toy_dataset(n: usize) -> WindowedDataset {
        let f = hourly_frame(
            "M",
            0,
            &[
                ("MET", present(&(0..n + 1).map(|i| i as f64).collect::<Vec<_>>())),
                ("IT", present(&(0..n + 1).map(|i| i as f64).collect::<Vec<_>>())),
            ],
        );
        build_forecast_windows(&f, &spec(&["MET"], "IT", 0, 1)).unwrap()
    }

    #[test]
    fn ratio_split_sizes() {
        let ds = toy_dataset(100);
        let (train, test) = split_ratio(&ds, 0.85, 7, SplitPolicy::Shuffled).unwrap();
        assert_eq!(train.len(), 85);
        assert_eq!(test.len(), 15);
    }

    #[test]
    fn ratio_split_boundary_keeps_both_sides() {
        let ds = toy_dataset(2);
        let (train, test) = split_ratio(&ds, 0.85, 7, SplitPolicy::Shuffled).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(test.len(), 1);
    }

    #[test]
    fn ratio_split_is_deterministic() {
        let ds = toy_dataset(50);
        let a = split_ratio(&ds, 0.85, 42, SplitPolicy::Shuffled).unwrap();
        let b = split_ratio(&ds, 0.85, 42, SplitPolicy::Shuffled).unwrap();
        assert_eq!(a, b);
        let c = split_ratio(&ds, 0.85, 43, SplitPolicy::Shuffled).unwrap();
        assert_ne!(a.0.targets, c.0.targets);
    }

    #[test]
    fn ratio_split_partitions_exactly() {
        let ds = toy_dataset(37);
        let (train, test) = split_ratio(&ds, 0.7, 3, SplitPolicy::Shuffled).unwrap();
        assert_eq!(train.len() + test.len(), ds.len());
        let mut all: Vec<f64> = train.targets.iter().chain(&test.targets).copied().collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut expect = ds.targets.clone();
        expect.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(all, expect);
    }

    #[test]
    fn group_split_holds_out_named_groups() {
        let a = weekly_yield_frame("A", 2023, 5);
        let b = weekly_yield_frame("A", 2024, 5);
        let c = weekly_yield_frame("B", 2023, 5);
        let ds = build_yield_windows(&[(&a, false), (&b, false), (&c, false)], &[], "Yield").unwrap();
        let (train, test) = split_leave_group_out(&ds, &[("A".into(), 2023)]).unwrap();
        assert_eq!(test.len(), 3);
        assert!(test.provenance.iter().all(|p| p.site == "A" && p.season == 2023));
        assert_eq!(train.len(), 6);
    }

    #[test]
    fn group_split_rejects_holding_everything() {
        let a = weekly_yield_frame("A", 2023, 5);
        let ds = build_yield_windows(&[(&a, false)], &[], "Yield").unwrap();
        assert!(matches!(
            split_leave_group_out(&ds, &[("A".into(), 2023)]),
            Err(Error::DegenerateSplit("train"))
        ));
    }

    #[test]
    fn group_split_rejects_unknown_group() {
        let a = weekly_yield_frame("A", 2023, 5);
        let b = weekly_yield_frame("B", 2023, 5);
        let ds = build_yield_windows(&[(&a, false), (&b, false)], &[], "Yield").unwrap();
        assert!(matches!(
            split_leave_group_out(&ds, &[("Z".into(), 2023)]),
            Err(Error::UnknownGroup(_))
        ));
    }

    #[test]
    fn prediction_rows_match_training_layout() {
        let f = hourly_frame(
            "M",
            0,
            &[
                ("MET", present(&[0.0, 1.0, 2.0, 3.0, 4.0])),
                ("MEH", present(&[9.0, 8.0, 7.0, 6.0, 5.0])),
                ("IT", present(&[100.0, 101.0, 102.0, 103.0, 104.0])),
            ],
        );
        let exog = vec!["MET".to_string(), "MEH".to_string()];
        let sets = build_backcast_windows(&f, &exog, &["IT".into()], 3).unwrap();
        let ds = &sets[0].1;
        let (names, rows) = backcast_feature_rows(&f, &exog, 3).unwrap();
        assert_eq!(names, ds.feature_names);
        assert_eq!(rows.len(), ds.len());
        // Training rows run in descending anchor order; prediction rows
        // ascend. Same anchors, same feature vectors.
        for (i, (anchor, row)) in rows.iter().enumerate() {
            let train_row = &ds.features[ds.len() - 1 - i];
            assert_eq!(row, train_row, "anchor {anchor}");
        }
    }

    #[test]
    fn prediction_rows_skip_incomplete_windows() {
        let mut met = present(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        met[2] = None;
        let f = hourly_frame("M", 0, &[("MET", met)]);
        let (_, rows) = backcast_feature_rows(&f, &["MET".into()], 2).unwrap();
        // Windows touching the missing hour 2 are dropped.
        let anchors: Vec<usize> = rows.iter().map(|(a, _)| *a).collect();
        assert_eq!(anchors, vec![0, 3]);
    }
}
