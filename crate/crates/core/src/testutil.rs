//! Frame builders shared by unit and integration tests.

use chrono::{DateTime, TimeZone, Utc};

use crate::frame::{ChannelKind, ChannelSpec, Resolution, TimeSeriesFrame};

pub fn base_time() -> DateTime<Utc> {
    // A Monday, so daily -> weekly resampling gets whole weeks.
    Utc.with_ymd_and_hms(2023, 5, 1, 0, 0, 0).unwrap()
}

pub fn hour(h: i64) -> DateTime<Utc> {
    base_time() + chrono::Duration::hours(h)
}

pub fn hourly_frame(site: &str, start_hour: i64, channels: &[(&str, Vec<Option<f64>>)]) -> TimeSeriesFrame {
    frame_at(site, 2023, Resolution::Hourly, start_hour * 3600, channels)
}

pub fn frame_at(
    site: &str,
    season: i32,
    resolution: Resolution,
    start_offset_secs: i64,
    channels: &[(&str, Vec<Option<f64>>)],
) -> TimeSeriesFrame {
    let n = channels[0].1.len();
    let start = base_time() + chrono::Duration::seconds(start_offset_secs);
    let step = resolution.step_seconds();
    let timestamps = (0..n as i64)
        .map(|i| start + chrono::Duration::seconds(i * step))
        .collect();
    let specs = channels
        .iter()
        .map(|(a, _)| {
            let kind = match *a {
                "Yield" => ChannelKind::Yield,
                "MET" | "Vis" | "Pre" | "MEH" | "Rad" | "WS" | "WD" | "WG" | "RFA" => ChannelKind::Weather,
                _ => ChannelKind::Sensor,
            };
            ChannelSpec::new(*a, "u", kind, None).unwrap()
        })
        .collect();
    let values = channels.iter().map(|(_, v)| v.clone()).collect();
    TimeSeriesFrame::new(site, season, resolution, timestamps, specs, values).unwrap()
}

pub fn present(vals: &[f64]) -> Vec<Option<f64>> {
    vals.iter().copied().map(Some).collect()
}
