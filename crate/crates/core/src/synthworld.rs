//! Deterministic world generator: weather, in-tunnel sensors, and weekly
//! yield with known ground-truth response functions. Used as the
//! desk-scale stand-in for farm data and as the oracle behind the
//! end-to-end tests.
//!
//! Two sensor-response modes exist. In tree-friendly mode every weather
//! channel is quantized to a coarse per-channel grid and every sensor is
//! a piecewise-constant function of its (quantized) driver with
//! breakpoints at grid midpoints. Split thresholds learned between
//! adjacent grid values then coincide with the true breakpoints, so tree
//! learners can recover the response exactly — a sharp correctness
//! oracle. Smooth mode uses linear-lagged responses instead, which trees
//! can only approximate; that gives realistic difficulty.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frame::{ChannelRegistry, Resolution, TimeSeriesFrame};

pub const SITES: [&str; 2] = ["seaton", "multispan"];
pub const EXOGENOUS: [&str; 9] = ["MET", "Vis", "Pre", "MEH", "Rad", "WS", "WD", "WG", "RFA"];
pub const BACKCAST_TARGETS: [&str; 6] = ["WU", "IT", "IH", "SM", "ST", "PAR"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseMode {
    /// Quantized weather, piecewise-constant sensor responses.
    TreeFriendly,
    /// Continuous weather, linear-lagged sensor responses.
    Smooth,
}

/// Ground-truth mapping from one driving weather channel to a sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ResponseSpec {
    /// Piecewise-constant: value is `levels[i]` where `i` counts the
    /// breakpoints strictly below the driver value.
    Step {
        driver: String,
        breakpoints: Vec<f64>,
        levels: Vec<f64>,
    },
    /// intercept + slope * driver(t) + lag_slope * driver(t + lag).
    Linear {
        driver: String,
        intercept: f64,
        slope: f64,
        lag: usize,
        lag_slope: f64,
    },
}

impl ResponseSpec {
    pub fn driver(&self) -> &str {
        match self {
            ResponseSpec::Step { driver, .. } | ResponseSpec::Linear { driver, .. } => driver,
        }
    }

    /// Noise-free response given the driver at the same timestamp and at
    /// the lag offset (ignored for step responses).
    pub fn value(&self, now: f64, lagged: f64) -> f64 {
        match self {
            ResponseSpec::Step { breakpoints, levels, .. } => {
                let i = breakpoints.iter().filter(|b| now > **b).count();
                levels[i]
            }
            ResponseSpec::Linear { intercept, slope, lag_slope, .. } => {
                intercept + slope * now + lag_slope * lagged
            }
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if let ResponseSpec::Step { breakpoints, levels, .. } = self {
            if levels.len() != breakpoints.len() + 1 {
                return Err(Error::InvalidParams(format!(
                    "response for `{name}`: need {} levels for {} breakpoints",
                    breakpoints.len() + 1,
                    breakpoints.len()
                )));
            }
            if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidParams(format!(
                    "response for `{name}`: breakpoints must be strictly increasing"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorResponse {
    pub spec: ResponseSpec,
    pub noise_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub seed: u64,
    pub first_season: i32,
    pub n_seasons: usize,
    /// Must be a multiple of 7 so the hourly series covers whole weeks.
    pub season_days: u32,
    pub mode: ResponseMode,
    pub responses: BTreeMap<String, SensorResponse>,
    pub yield_noise_std: f64,
}

impl WorldParams {
    /// Noiseless tree-friendly world: the correctness oracle.
    pub fn tree_friendly(seed: u64) -> WorldParams {
        let step = |driver: &str, breakpoints: &[f64], levels: &[f64]| SensorResponse {
            spec: ResponseSpec::Step {
                driver: driver.to_string(),
                breakpoints: breakpoints.to_vec(),
                levels: levels.to_vec(),
            },
            noise_std: 0.0,
        };
        let mut responses = BTreeMap::new();
        // Breakpoints sit at grid midpoints of each driver's
        // quantization step (MET/MEH/Pre: 0.5; Rad: 25). Responses that
        // share a driver also share its breakpoints, so the dead zones
        // the weather generator clears around them stay disjoint.
        responses.insert(
            "IT".to_string(),
            step("MET", &[8.25, 14.25, 20.25, 26.25], &[12.0, 16.0, 21.0, 26.0, 30.0]),
        );
        responses.insert(
            "ST".to_string(),
            step("MET", &[8.25, 14.25, 20.25, 26.25], &[8.0, 12.0, 16.0, 20.0, 24.0]),
        );
        responses.insert(
            "IH".to_string(),
            step("MEH", &[32.25, 55.25, 78.25], &[35.0, 55.0, 70.0, 88.0]),
        );
        responses.insert(
            "SM".to_string(),
            step("Pre", &[999.25, 1013.25, 1024.25], &[25.0, 32.0, 41.0, 50.0]),
        );
        responses.insert(
            "PAR".to_string(),
            step("Rad", &[12.5, 187.5, 412.5, 612.5], &[0.0, 150.0, 400.0, 800.0, 1200.0]),
        );
        responses.insert(
            "WU".to_string(),
            step("MET", &[8.25, 14.25, 20.25, 26.25], &[2.0, 5.0, 9.0, 14.0, 20.0]),
        );
        WorldParams {
            seed,
            first_season: 2021,
            n_seasons: 2,
            season_days: 42,
            mode: ResponseMode::TreeFriendly,
            responses,
            yield_noise_std: 0.0,
        }
    }

    /// Same step responses, but every sensor observed through Gaussian
    /// noise of the given standard deviation.
    pub fn with_sensor_noise(mut self, std: f64) -> WorldParams {
        for r in self.responses.values_mut() {
            r.noise_std = std;
        }
        self
    }

    /// Smooth linear-lagged world for realistic-difficulty runs.
    pub fn smooth(seed: u64) -> WorldParams {
        let linear = |driver: &str, intercept: f64, slope: f64, lag_slope: f64| SensorResponse {
            spec: ResponseSpec::Linear {
                driver: driver.to_string(),
                intercept,
                slope,
                lag: 2,
                lag_slope,
            },
            noise_std: 0.5,
        };
        let mut responses = BTreeMap::new();
        responses.insert("IT".to_string(), linear("MET", 5.0, 0.8, 0.2));
        responses.insert("ST".to_string(), linear("MET", 6.0, 0.4, 0.3));
        responses.insert("IH".to_string(), linear("MEH", 12.0, 0.7, 0.1));
        responses.insert("SM".to_string(), linear("Pre", -260.0, 0.25, 0.04));
        responses.insert("PAR".to_string(), linear("Rad", 10.0, 1.3, 0.15));
        responses.insert("WU".to_string(), linear("MET", 1.0, 0.35, 0.1));
        WorldParams {
            seed,
            first_season: 2021,
            n_seasons: 2,
            season_days: 42,
            mode: ResponseMode::Smooth,
            responses,
            yield_noise_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.season_days == 0 || self.season_days % 7 != 0 {
            return Err(Error::InvalidParams(format!(
                "season_days {} must be a positive multiple of 7",
                self.season_days
            )));
        }
        if self.n_seasons == 0 {
            return Err(Error::InvalidParams("n_seasons must be >= 1".into()));
        }
        if self.yield_noise_std < 0.0 {
            return Err(Error::InvalidParams("yield_noise_std must be >= 0".into()));
        }
        for (name, r) in &self.responses {
            r.spec.validate(name)?;
            if r.noise_std < 0.0 {
                return Err(Error::InvalidParams(format!(
                    "noise_std for `{name}` must be >= 0"
                )));
            }
            if !EXOGENOUS.contains(&r.spec.driver()) {
                return Err(Error::UnknownChannel(r.spec.driver().to_string()));
            }
        }
        Ok(())
    }

    pub fn seasons(&self) -> Vec<i32> {
        (0..self.n_seasons as i32).map(|i| self.first_season + i).collect()
    }

    /// Serialize the ground truth (response specs, noise levels, seeds)
    /// so tests can compute the Bayes-optimal error per channel.
    pub fn write_truth_manifest(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Independent, platform-stable RNG stream per (seed, site, season, tag).
fn stream(seed: u64, site: &str, season: i32, tag: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(site.as_bytes());
    hasher.update(season.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Standard normal via Box-Muller; consumes two uniforms per call.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn quantize(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

/// Push a value out of the open band (bp - width, bp + width) around the
/// nearest breakpoint, onto the band edge on its own side. With
/// breakpoints at grid midpoints and width a half-integer multiple of
/// the grid step, both edges are grid points, so a midpoint threshold
/// learned between them lands exactly on the breakpoint and no driver
/// value ever falls between a learned threshold and the true breakpoint.
fn clear_band(v: f64, breakpoints: &[f64], width: f64) -> f64 {
    for bp in breakpoints {
        if (v - bp).abs() < width {
            return if v <= *bp { bp - width } else { bp + width };
        }
    }
    v
}

/// Season start: the first Monday on or after 1 May, so hourly series
/// align with weekly (Monday-floored) buckets.
pub fn season_start(season: i32) -> DateTime<Utc> {
    let mut date = NaiveDate::from_ymd_opt(season, 5, 1).expect("valid date");
    while date.weekday().num_days_from_monday() != 0 {
        date += Duration::days(1);
    }
    Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).expect("valid time"))
}

/// Hourly weather for one (site, season): MET as seasonal + diurnal
/// sinusoids plus noise, MEH anti-correlated with MET, Rad zero at
/// night, the rest bounded seeded processes. Tree-friendly mode snaps
/// every channel to its per-channel grid.
pub fn generate_weather(params: &WorldParams, site: &str, season: i32) -> Result<TimeSeriesFrame> {
    params.validate()?;
    let n = params.season_days as usize * 24;
    let start = season_start(season);
    let timestamps: Vec<DateTime<Utc>> = (0..n as i64)
        .map(|h| start + Duration::hours(h))
        .collect();
    let quant = params.mode == ResponseMode::TreeFriendly;
    // Heated site runs warmer outside air? No — weather is shared
    // climate, but per-site streams keep the two tunnels' stations
    // distinct, as on the real farm.
    let mut rng = stream(params.seed, site, season, "weather");
    let season_len = n as f64;

    // In tree-friendly mode, keep driver channels out of a band around
    // every step breakpoint (see `clear_band`).
    let mut bands: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    if quant {
        for r in params.responses.values() {
            if let ResponseSpec::Step { driver, breakpoints, .. } = &r.spec {
                let list = bands.entry(driver.clone()).or_default();
                for bp in breakpoints {
                    if !list.contains(bp) {
                        list.push(*bp);
                    }
                }
            }
        }
    }
    let cleared = |name: &str, v: f64, step: f64| match bands.get(name) {
        Some(bps) => clear_band(v, bps, 3.5 * step),
        None => v,
    };

    let mut columns: BTreeMap<&str, Vec<Option<f64>>> = BTreeMap::new();
    for c in EXOGENOUS {
        columns.insert(c, Vec::with_capacity(n));
    }
    for t in 0..n {
        let hour = (t % 24) as f64;
        let seasonal = (2.0 * PI * t as f64 / season_len).sin();
        let diurnal = (2.0 * PI * (hour - 9.0) / 24.0).sin();
        let met_raw = 14.0 + 6.0 * seasonal + 4.0 * diurnal + rng.gen_range(-5.0..5.0);
        let met = if quant { cleared("MET", quantize(met_raw, 0.5), 0.5) } else { met_raw };

        let meh_raw = (95.0 - 2.2 * met + rng.gen_range(-3.0..3.0)).clamp(5.0, 100.0);
        let meh = if quant { cleared("MEH", quantize(meh_raw, 0.5), 0.5) } else { meh_raw };

        let daylight = (PI * (hour - 6.0) / 14.0).sin();
        let rad_raw = if (6.0..20.0).contains(&hour) && daylight > 0.0 {
            (700.0 * daylight * (0.8 + 0.4 * seasonal.abs()) + rng.gen_range(-40.0..40.0)).max(0.0)
        } else {
            0.0
        };
        let rad = if quant {
            cleared("Rad", quantize(rad_raw, 25.0), 25.0).max(0.0)
        } else {
            rad_raw
        };

        let pre_raw = (1013.0 + 12.0 * (2.0 * PI * t as f64 / (24.0 * 14.0)).sin()
            + rng.gen_range(-6.0..6.0))
        .clamp(990.0, 1036.0);
        let pre = if quant { cleared("Pre", quantize(pre_raw, 0.5), 0.5) } else { pre_raw };

        let vis_raw = (1500.0 + 900.0 * (2.0 * PI * t as f64 / (24.0 * 3.0)).sin()
            + rng.gen_range(-400.0..400.0))
        .clamp(100.0, 3000.0);
        let vis = if quant { quantize(vis_raw, 50.0) } else { vis_raw };

        let ws_raw = (8.0 + 5.0 * (2.0 * PI * t as f64 / (24.0 * 2.0)).sin()
            + rng.gen_range(-4.0..4.0))
        .clamp(0.0, 40.0);
        let ws = if quant { quantize(ws_raw, 1.0) } else { ws_raw };

        let wg_raw = ws + rng.gen_range(0.0..6.0);
        let wg = if quant { quantize(wg_raw, 1.0) } else { wg_raw };

        let wd_raw: f64 = rng.gen_range(0.0..360.0);
        let wd = if quant { quantize(wd_raw, 5.0).min(355.0) } else { wd_raw };

        let rain: f64 = rng.gen_range(0.0..1.0);
        let rfa_raw = if rain < 0.15 { rng.gen_range(0.2..6.0) } else { 0.0 };
        let rfa = if quant { quantize(rfa_raw, 1.0) } else { rfa_raw };

        for (name, v) in [
            ("MET", met),
            ("Vis", vis),
            ("Pre", pre),
            ("MEH", meh),
            ("Rad", rad),
            ("WS", ws),
            ("WD", wd),
            ("WG", wg),
            ("RFA", rfa),
        ] {
            columns.get_mut(name).unwrap().push(Some(v));
        }
    }

    let registry = ChannelRegistry::standard();
    let specs = EXOGENOUS
        .iter()
        .map(|c| registry.get(c).expect("standard channel").clone())
        .collect();
    let values = EXOGENOUS
        .iter()
        .map(|c| columns.remove(*c).unwrap())
        .collect();
    TimeSeriesFrame::new(site, season, Resolution::Hourly, timestamps, specs, values)
}

/// Sensor channels plus the weekly yield series driven by a weather
/// frame. Sensors are the configured responses of their drivers (noise
/// optional); weekly yield is a saturating function of the previous
/// week's accumulated in-tunnel degree-units and PAR, clipped to
/// [0, 1.2].
pub fn generate_polytunnel(
    weather: &TimeSeriesFrame,
    params: &WorldParams,
) -> Result<(TimeSeriesFrame, TimeSeriesFrame)> {
    params.validate()?;
    let n = weather.len();
    let registry = ChannelRegistry::standard();

    let mut specs = Vec::new();
    let mut values: Vec<Vec<Option<f64>>> = Vec::new();
    for sensor in BACKCAST_TARGETS {
        let response = params.responses.get(sensor).ok_or_else(|| {
            Error::Config {
                field: format!("responses.{sensor}"),
                message: "no response configured".into(),
            }
        })?;
        let driver = weather.values(response.spec.driver())?;
        let lag = match &response.spec {
            ResponseSpec::Linear { lag, .. } => *lag,
            ResponseSpec::Step { .. } => 0,
        };
        let mut rng = stream(params.seed, weather.site(), weather.season(), sensor);
        let mut col = Vec::with_capacity(n);
        for t in 0..n {
            let now = driver[t].expect("generated weather has no gaps");
            let lagged = driver[(t + lag).min(n - 1)].expect("generated weather has no gaps");
            let mut v = response.spec.value(now, lagged);
            if response.noise_std > 0.0 {
                v += response.noise_std * gauss(&mut rng);
            }
            col.push(Some(v));
        }
        specs.push(registry.get(sensor).expect("standard channel").clone());
        values.push(col);
    }
    let sensors = TimeSeriesFrame::new(
        weather.site(),
        weather.season(),
        Resolution::Hourly,
        weather.timestamps().to_vec(),
        specs,
        values,
    )?;

    let yields = generate_yield(&sensors, params)?;
    Ok((sensors, yields))
}

fn generate_yield(sensors: &TimeSeriesFrame, params: &WorldParams) -> Result<TimeSeriesFrame> {
    let n = sensors.len();
    let n_weeks = n / (24 * 7);
    let it = sensors.values("IT")?;
    let par = sensors.values("PAR")?;
    let mut rng = stream(params.seed, sensors.site(), sensors.season(), "yield");
    let mut week_z = Vec::with_capacity(n_weeks);
    for w in 0..n_weeks {
        let hours = (w * 168)..((w + 1) * 168);
        let degree_units: f64 = hours
            .clone()
            .map(|t| (it[t].unwrap_or(0.0) - 10.0).max(0.0))
            .sum::<f64>()
            / (168.0 * 15.0);
        let mean_par: f64 =
            hours.map(|t| par[t].unwrap_or(0.0)).sum::<f64>() / 168.0 / 1500.0;
        week_z.push(degree_units + mean_par);
    }
    let mut vals = Vec::with_capacity(n_weeks);
    for w in 0..n_weeks {
        // One-week lag: growth follows the previous week's conditions.
        let z = week_z[w.saturating_sub(1)];
        let mut y = 1.2 * z / (0.6 + z);
        if params.yield_noise_std > 0.0 {
            y += params.yield_noise_std * gauss(&mut rng);
        }
        vals.push(Some(y.clamp(0.0, 1.2)));
    }
    let timestamps: Vec<DateTime<Utc>> = (0..n_weeks as i64)
        .map(|w| sensors.timestamps()[0] + Duration::weeks(w))
        .collect();
    let registry = ChannelRegistry::standard();
    TimeSeriesFrame::new(
        sensors.site(),
        sensors.season(),
        Resolution::Weekly,
        timestamps,
        vec![registry.get("Yield").expect("standard channel").clone()],
        vec![vals],
    )
}
