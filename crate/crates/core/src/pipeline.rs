//! Orchestration of the two-stage experiment: backcast model training
//! and synthetic-season generation, then the yield-forecast matrix over
//! feature sets and data modes. Every stage is a deterministic function
//! of (config, seed); reruns produce byte-identical output trees.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{BackcastConfig, PipelineConfig};
use crate::correlate::correlation_matrix;
use crate::ensemble::{
    fit_gbdt, fit_random_forest, fit_xgb, BoostParams, EnsembleModel, ForestParams, Variant,
};
use crate::error::{Error, Result};
use crate::evaluate::{mae, rmse, DataMode, EvalReport, EvalRow, Selection};
use crate::frame::{join_frames, Resolution, TimeSeriesFrame};
use crate::ingest::{read_frame, write_frame};
use crate::preprocess::{resample, NormalizationSpec};
use crate::synthworld;
use crate::windowing::{
    backcast_feature_rows, build_backcast_windows, build_yield_windows, split_leave_group_out,
    split_ratio, WindowedDataset,
};

/// Stable sub-seed derivation: independent streams per stage/site/target
/// regardless of iteration order or thread count.
pub fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// One (site, season) group. Real groups carry sensor data; groups for
/// seasons without deployed sensors have `sensors: None` and get their
/// series reconstructed.
#[derive(Debug, Clone)]
pub struct SiteSeasonData {
    pub site: String,
    pub season: i32,
    pub weather: TimeSeriesFrame,
    pub sensors: Option<TimeSeriesFrame>,
    pub yields: Option<TimeSeriesFrame>,
    /// Ground-truth sensors for reconstruction-only seasons, available
    /// only in generated worlds; never used for training.
    pub truth_sensors: Option<TimeSeriesFrame>,
}

#[derive(Debug, Clone)]
pub struct DataSet {
    pub groups: Vec<SiteSeasonData>,
}

impl DataSet {
    pub fn real_groups(&self) -> impl Iterator<Item = &SiteSeasonData> {
        self.groups.iter().filter(|g| g.sensors.is_some())
    }

    pub fn synthetic_groups(&self) -> impl Iterator<Item = &SiteSeasonData> {
        self.groups.iter().filter(|g| g.sensors.is_none())
    }

    pub fn sites(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.groups.iter().map(|g| g.site.clone()).collect();
        set.into_iter().collect()
    }
}

/// Materialize the configured data source: generate the world or read
/// the frame files.
pub fn load_or_generate_data(config: &PipelineConfig) -> Result<DataSet> {
    let mut groups = Vec::new();
    if let Some(world) = config.world_params() {
        for site in &config.data.world.as_ref().expect("world set").sites {
            for season in world.seasons() {
                let weather = synthworld::generate_weather(&world, site, season)?;
                let (sensors, yields) = synthworld::generate_polytunnel(&weather, &world)?;
                groups.push(SiteSeasonData {
                    site: site.clone(),
                    season,
                    weather,
                    sensors: Some(sensors),
                    yields: Some(yields),
                    truth_sensors: None,
                });
            }
            for &season in &config.data.synthetic_seasons {
                let weather = synthworld::generate_weather(&world, site, season)?;
                let (truth, yields) = synthworld::generate_polytunnel(&weather, &world)?;
                groups.push(SiteSeasonData {
                    site: site.clone(),
                    season,
                    weather,
                    sensors: None,
                    yields: Some(yields),
                    truth_sensors: Some(truth),
                });
            }
        }
    } else {
        let registry = crate::frame::ChannelRegistry::standard();
        for entry in &config.data.frames {
            let (weather, _) = read_frame(
                &entry.weather,
                &registry,
                &entry.site,
                entry.season,
                Resolution::Hourly,
            )?;
            let sensors = match &entry.sensors {
                Some(p) => {
                    Some(read_frame(p, &registry, &entry.site, entry.season, Resolution::Hourly)?.0)
                }
                None => None,
            };
            let yields = match &entry.yield_frame {
                Some(p) => {
                    Some(read_frame(p, &registry, &entry.site, entry.season, Resolution::Weekly)?.0)
                }
                None => None,
            };
            groups.push(SiteSeasonData {
                site: entry.site.clone(),
                season: entry.season,
                weather,
                sensors,
                yields,
                truth_sensors: None,
            });
        }
    }
    if groups.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(DataSet { groups })
}

fn fit_window_normalizer(
    ds: &WindowedDataset,
    interval: (f64, f64),
    tag: &str,
) -> Result<NormalizationSpec> {
    let columns: Vec<(String, Vec<f64>)> = ds
        .feature_names
        .iter()
        .enumerate()
        .map(|(i, name)| (name.clone(), ds.features.iter().map(|r| r[i]).collect()))
        .collect();
    NormalizationSpec::from_columns(
        columns.iter().map(|(n, v)| (n.as_str(), v.as_slice())),
        interval.0,
        interval.1,
        tag,
    )
}

fn transform_rows(
    spec: &NormalizationSpec,
    names: &[String],
    rows: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|row| {
            names
                .iter()
                .zip(row)
                .map(|(name, &v)| spec.transform(name, v))
                .collect()
        })
        .collect()
}

/// One point of an actual-vs-backcast comparison series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub timestamp: DateTime<Utc>,
    pub actual: f64,
    pub rf: f64,
    pub gbdt: f64,
    pub xgb: f64,
}

#[derive(Debug)]
pub struct BackcastOutcome {
    pub report: EvalReport,
    pub winners: BTreeMap<(String, String), Selection>,
    /// Selected model per (site, target): exactly the winner above.
    pub models: BTreeMap<(String, String), EnsembleModel>,
    pub normalizers: BTreeMap<(String, String), NormalizationSpec>,
    /// Held-out actual-vs-predicted series per (site, target).
    pub series: BTreeMap<(String, String), Vec<SeriesPoint>>,
}

fn train_candidates(
    train: &WindowedDataset,
    train_x: &[Vec<f64>],
    forest: &ForestParams,
    gbdt: &BoostParams,
    xgb: &BoostParams,
    seed_parts: &[&str],
    master: u64,
) -> Result<Vec<(Variant, EnsembleModel)>> {
    let with = |tag: &str| {
        let mut parts = seed_parts.to_vec();
        parts.push(tag);
        derive_seed(master, &parts)
    };
    let rf = fit_random_forest(
        train_x,
        &train.targets,
        &train.feature_names,
        &ForestParams {
            seed: with("rf"),
            ..forest.clone()
        },
    )?;
    let gb = fit_gbdt(
        train_x,
        &train.targets,
        &train.feature_names,
        &BoostParams {
            seed: with("gbdt"),
            ..gbdt.clone()
        },
    )?;
    let xg = fit_xgb(
        train_x,
        &train.targets,
        &train.feature_names,
        &BoostParams {
            seed: with("xgb"),
            ..xgb.clone()
        },
    )?;
    Ok(vec![(Variant::Rf, rf), (Variant::Gbdt, gb), (Variant::Xgb, xg)])
}

/// Train RF/GBDT/XGB backcasters per (site, target), evaluate on the
/// held-out split, and keep the lowest-RMSE model per target.
pub fn run_backcast_training(config: &PipelineConfig, data: &DataSet) -> Result<BackcastOutcome> {
    let b = &config.backcast;
    let mut report = EvalReport::default();
    let mut winners = BTreeMap::new();
    let mut models = BTreeMap::new();
    let mut normalizers = BTreeMap::new();
    let mut series = BTreeMap::new();

    for site in data.sites() {
        // Windows per target, concatenated over this site's real seasons.
        let mut per_target: BTreeMap<String, WindowedDataset> = BTreeMap::new();
        for group in data.real_groups().filter(|g| g.site == site) {
            let joined = join_frames(&[&group.weather, group.sensors.as_ref().expect("real")])?;
            for (target, ds) in
                build_backcast_windows(&joined, &b.exogenous, &b.targets, b.window)?
            {
                match per_target.get_mut(&target) {
                    Some(all) => all.concat(&ds)?,
                    None => {
                        per_target.insert(target, ds);
                    }
                }
            }
        }
        if per_target.is_empty() {
            continue;
        }
        for (target, ds) in per_target {
            if ds.is_empty() {
                return Err(Error::InvalidDataset(format!(
                    "no complete backcast windows for {site}/{target}"
                )));
            }
            let split_seed = derive_seed(config.seed, &["backcast-split", &site, &target]);
            let (train, test) = split_ratio(&ds, b.train_fraction, split_seed, b.split)?;
            let norm = fit_window_normalizer(
                &train,
                b.normalization,
                &format!("backcast/{site}/{target}/train"),
            )?;
            let train_x = transform_rows(&norm, &train.feature_names, &train.features)?;
            let test_x = transform_rows(&norm, &test.feature_names, &test.features)?;

            let candidates = train_candidates(
                &train,
                &train_x,
                &b.forest,
                &b.gbdt,
                &b.xgb,
                &["backcast", &site, &target],
                config.seed,
            )?;

            let mut best: Option<(Variant, f64, bool)> = None;
            let mut predictions: BTreeMap<Variant, Vec<f64>> = BTreeMap::new();
            for (variant, model) in &candidates {
                let pred = model.predict(&test_x, &test.feature_names)?;
                let r = rmse(&pred, &test.targets)?;
                let m = mae(&pred, &test.targets)?;
                report.push(EvalRow::new(
                    *variant,
                    site.clone(),
                    target.clone(),
                    DataMode::RealOnly,
                    r,
                    m,
                    test.len(),
                ));
                match &mut best {
                    None => best = Some((*variant, r, false)),
                    Some((_, br, tie)) => {
                        if r < *br {
                            best = Some((*variant, r, false));
                        } else if r == *br {
                            *tie = true;
                        }
                    }
                }
                predictions.insert(*variant, pred);
            }
            let (winner, best_rmse, tie) = best.expect("three candidates");

            let mut points: Vec<SeriesPoint> = (0..test.len())
                .map(|i| SeriesPoint {
                    timestamp: test.provenance[i].anchor,
                    actual: test.targets[i],
                    rf: predictions[&Variant::Rf][i],
                    gbdt: predictions[&Variant::Gbdt][i],
                    xgb: predictions[&Variant::Xgb][i],
                })
                .collect();
            points.sort_by_key(|p| p.timestamp);

            let key = (site.clone(), target.clone());
            let model = candidates
                .into_iter()
                .find(|(v, _)| *v == winner)
                .map(|(_, m)| m)
                .expect("winner among candidates");
            winners.insert(
                key.clone(),
                Selection {
                    model: winner,
                    rmse: best_rmse,
                    tie,
                },
            );
            models.insert(key.clone(), model);
            normalizers.insert(key.clone(), norm);
            series.insert(key, points);
        }
    }
    if winners.is_empty() {
        return Err(Error::EmptyInput);
    }
    report.validate()?;
    Ok(BackcastOutcome {
        report,
        winners,
        models,
        normalizers,
        series,
    })
}

/// Reconstructed sensor frames for seasons without deployed hardware.
#[derive(Debug, Clone, Default)]
pub struct SyntheticFrameSet {
    pub frames: Vec<TimeSeriesFrame>,
    pub window: usize,
    /// "site/target" -> winning model variant used for that series.
    pub model_keys: BTreeMap<String, String>,
    /// "site/season/target" -> anchors left missing (trailing window
    /// plus any incomplete exogenous window).
    pub missing: BTreeMap<String, usize>,
}

impl SyntheticFrameSet {
    pub fn empty() -> SyntheticFrameSet {
        SyntheticFrameSet::default()
    }

    pub fn get(&self, site: &str, season: i32) -> Option<&TimeSeriesFrame> {
        self.frames
            .iter()
            .find(|f| f.site() == site && f.season() == season)
    }
}

/// Drive each (site, target) winner with the weather of every
/// sensor-less season. Anchors lacking a complete future window stay
/// missing and are reported.
pub fn generate_synthetic_seasons(
    config: &PipelineConfig,
    outcome: &BackcastOutcome,
    data: &DataSet,
) -> Result<SyntheticFrameSet> {
    let b = &config.backcast;
    let registry = crate::frame::ChannelRegistry::standard();
    let mut set = SyntheticFrameSet {
        window: b.window,
        ..SyntheticFrameSet::default()
    };
    for group in data.synthetic_groups() {
        let (names, rows) = backcast_feature_rows(&group.weather, &b.exogenous, b.window)?;
        let n = group.weather.len();
        let mut specs = Vec::new();
        let mut values = Vec::new();
        for target in &b.targets {
            let key = (group.site.clone(), target.clone());
            let model = outcome.models.get(&key).ok_or_else(|| {
                Error::InvalidDataset(format!(
                    "no selected backcast model for {}/{}",
                    group.site, target
                ))
            })?;
            let norm = outcome.normalizers.get(&key).expect("paired with model");
            let raw: Vec<Vec<f64>> = rows.iter().map(|(_, r)| r.clone()).collect();
            let x = transform_rows(norm, &names, &raw)?;
            let pred = model.predict(&x, &names)?;
            let mut col = vec![None; n];
            for ((anchor, _), p) in rows.iter().zip(pred) {
                col[*anchor] = Some(p);
            }
            set.missing.insert(
                format!("{}/{}/{}", group.site, group.season, target),
                n - rows.len(),
            );
            set.model_keys.insert(
                format!("{}/{}", group.site, target),
                outcome.winners[&key].model.to_string(),
            );
            specs.push(registry.get(target).ok_or_else(|| Error::UnknownChannel(target.clone()))?.clone());
            values.push(col);
        }
        set.frames.push(TimeSeriesFrame::new(
            &group.site,
            group.season,
            Resolution::Hourly,
            group.weather.timestamps().to_vec(),
            specs,
            values,
        )?);
    }
    Ok(set)
}

#[derive(Debug)]
pub struct YieldOutcome {
    /// Improvements relative to the same model's real-only yield-only row.
    pub report_yield_only: EvalReport,
    /// Improvements relative to the same model's real-only same-feature row.
    pub report_same_feature: EvalReport,
    pub counts: BTreeMap<String, u64>,
}

fn weekly_group_frame(
    weather: &TimeSeriesFrame,
    sensors: Option<&TimeSeriesFrame>,
    yields: &TimeSeriesFrame,
) -> Result<TimeSeriesFrame> {
    let hourly = match sensors {
        Some(s) => join_frames(&[weather, s])?,
        None => weather.clone(),
    };
    let weekly_env = resample(&hourly, Resolution::Weekly)?;
    let weekly_yield = if yields.resolution() == Resolution::Weekly {
        yields.clone()
    } else {
        resample(yields, Resolution::Weekly)?
    };
    join_frames(&[&weekly_env, &weekly_yield])
}

/// The Table-3-shaped matrix: 3 learners x feature sets x data modes,
/// leave-group-out evaluation on real seasons only.
pub fn run_yield_experiment(
    config: &PipelineConfig,
    data: &DataSet,
    synthetic: &SyntheticFrameSet,
) -> Result<YieldOutcome> {
    let f = &config.forecast;
    let holdout = config.holdout_groups();
    for (site, season) in &holdout {
        if data
            .synthetic_groups()
            .any(|g| g.site == *site && g.season == *season)
        {
            return Err(Error::Config {
                field: "forecast.holdout".to_string(),
                message: format!("{site}:{season} is a synthetic season; test rows must be real"),
            });
        }
    }

    // Weekly frames, real and synthetic, assembled once.
    let mut real_weekly = Vec::new();
    for g in data.real_groups() {
        let yields = g.yields.as_ref().ok_or_else(|| {
            Error::InvalidDataset(format!("no yield series for {}/{}", g.site, g.season))
        })?;
        real_weekly.push(weekly_group_frame(&g.weather, g.sensors.as_ref(), yields)?);
    }
    let mut synth_weekly = Vec::new();
    for g in data.synthetic_groups() {
        let yields = g.yields.as_ref().ok_or_else(|| {
            Error::InvalidDataset(format!("no yield series for {}/{}", g.site, g.season))
        })?;
        let sensors = synthetic.get(&g.site, g.season);
        synth_weekly.push(weekly_group_frame(&g.weather, sensors, yields)?);
    }

    let mut report = EvalReport::default();
    let mut counts = BTreeMap::new();
    for &mode in &f.data_modes {
        for &feature_set in &f.feature_sets {
            let mut groups: Vec<(&TimeSeriesFrame, bool)> =
                real_weekly.iter().map(|fr| (fr, false)).collect();
            if mode == DataMode::SynReal {
                groups.extend(synth_weekly.iter().map(|fr| (fr, true)));
            }
            let mut env = Vec::new();
            if feature_set.uses_sensors() {
                env.extend(f.pruned_sensors.iter().cloned());
            }
            if feature_set.uses_weather() {
                env.extend(config.backcast.exogenous.iter().cloned());
            }
            let ds = build_yield_windows(&groups, &env, "Yield")?;
            let (train, test) = split_leave_group_out(&ds, &holdout)?;
            if test.provenance.iter().any(|p| p.synthetic) {
                return Err(Error::InvalidDataset(
                    "synthetic rows leaked into the test side".into(),
                ));
            }
            let norm = fit_window_normalizer(
                &train,
                config.backcast.normalization,
                &format!("forecast/{feature_set}/{mode}/train"),
            )?;
            let train_x = transform_rows(&norm, &train.feature_names, &train.features)?;
            let test_x = transform_rows(&norm, &test.feature_names, &test.features)?;
            // Seeds exclude the data mode so an empty synthetic set makes
            // syn+real reproduce real-only exactly.
            let candidates = train_candidates(
                &train,
                &train_x,
                &f.forest,
                &f.gbdt,
                &f.xgb,
                &["forecast", feature_set.name()],
                config.seed,
            )?;
            for (variant, model) in &candidates {
                let pred = model.predict(&test_x, &test.feature_names)?;
                report.push(EvalRow::new(
                    *variant,
                    "",
                    feature_set.name(),
                    mode,
                    rmse(&pred, &test.targets)?,
                    mae(&pred, &test.targets)?,
                    test.len(),
                ));
            }
            let synth_rows = train.provenance.iter().filter(|p| p.synthetic).count();
            counts.insert(
                format!("forecast.train.{mode}.{feature_set}"),
                train.len() as u64,
            );
            counts.insert(
                format!("forecast.train_synthetic.{mode}.{feature_set}"),
                synth_rows as u64,
            );
            counts.insert(format!("forecast.test.{mode}.{feature_set}"), test.len() as u64);
        }
    }
    report.validate()?;
    let mut report_yield_only = report.clone();
    report_yield_only.annotate_improvements(crate::evaluate::BaselinePolicy::YieldOnlyBaseline)?;
    let mut report_same_feature = report;
    report_same_feature
        .annotate_improvements(crate::evaluate::BaselinePolicy::SameFeatureBaseline)?;
    Ok(YieldOutcome {
        report_yield_only,
        report_same_feature,
        counts,
    })
}

#[derive(Debug)]
pub struct ImputationOutcome {
    pub frame: TimeSeriesFrame,
    /// Row indices whose WU cell was filled by the model.
    pub imputed_rows: Vec<usize>,
    pub report: EvalReport,
    pub winner: Option<Variant>,
}

/// Fill gaps in the water-usage series from concurrent readings of the
/// other sensors and weather channels. Candidates are trained on rows
/// where WU is observed; the lowest-RMSE model fills only the gaps.
pub fn impute_water_usage(
    frame: &TimeSeriesFrame,
    predictors: &[String],
    config: &BackcastConfig,
    seed: u64,
) -> Result<ImputationOutcome> {
    let wu = frame.values("WU")?.to_vec();
    if wu.iter().all(|v| v.is_some()) {
        return Ok(ImputationOutcome {
            frame: frame.clone(),
            imputed_rows: Vec::new(),
            report: EvalReport::default(),
            winner: None,
        });
    }
    let cols: Vec<&[Option<f64>]> = predictors
        .iter()
        .map(|p| frame.values(p))
        .collect::<Result<_>>()?;
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut gap_rows = Vec::new();
    let mut unpredictable = 0usize;
    for t in 0..frame.len() {
        let row: Option<Vec<f64>> = cols.iter().map(|c| c[t]).collect();
        match (wu[t], row) {
            (Some(v), Some(r)) => {
                x.push(r);
                y.push(v);
            }
            (None, Some(r)) => gap_rows.push((t, r)),
            (None, None) => unpredictable += 1,
            (Some(_), None) => {}
        }
    }
    if y.is_empty() {
        return Err(Error::AllMissing("WU".into()));
    }
    if unpredictable > 0 {
        return Err(Error::InvalidDataset(format!(
            "predictors missing over {unpredictable} WU gap rows"
        )));
    }

    // Borrow the windowed-dataset machinery shape-free: plain matrices.
    let names: Vec<String> = predictors.to_vec();
    let n = y.len();
    let split_seed = derive_seed(seed, &["wu-impute-split", frame.site()]);
    let mut indices: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(split_seed);
        indices.shuffle(&mut rng);
    }
    let train_n = ((n as f64 * config.train_fraction).floor() as usize).clamp(1, n - 1);
    let take = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            idx.iter().map(|&i| x[i].clone()).collect(),
            idx.iter().map(|&i| y[i]).collect(),
        )
    };
    let (train_x, train_y) = take(&indices[..train_n]);
    let (test_x, test_y) = take(&indices[train_n..]);

    let with = |tag: &str| derive_seed(seed, &["wu-impute", frame.site(), tag]);
    let candidates = vec![
        (
            Variant::Rf,
            fit_random_forest(
                &train_x,
                &train_y,
                &names,
                &ForestParams {
                    seed: with("rf"),
                    ..config.forest.clone()
                },
            )?,
        ),
        (
            Variant::Gbdt,
            fit_gbdt(
                &train_x,
                &train_y,
                &names,
                &BoostParams {
                    seed: with("gbdt"),
                    ..config.gbdt.clone()
                },
            )?,
        ),
        (
            Variant::Xgb,
            fit_xgb(
                &train_x,
                &train_y,
                &names,
                &BoostParams {
                    seed: with("xgb"),
                    ..config.xgb.clone()
                },
            )?,
        ),
    ];
    let mut report = EvalReport::default();
    let mut best: Option<(Variant, f64)> = None;
    for (variant, model) in &candidates {
        let pred = model.predict(&test_x, &names)?;
        let r = rmse(&pred, &test_y)?;
        report.push(EvalRow::new(
            *variant,
            frame.site(),
            "WU",
            DataMode::RealOnly,
            r,
            mae(&pred, &test_y)?,
            test_y.len(),
        ));
        if best.map_or(true, |(_, br)| r < br) {
            best = Some((*variant, r));
        }
    }
    let (winner, _) = best.expect("three candidates");
    let model = &candidates.iter().find(|(v, _)| *v == winner).expect("winner").1;

    let mut filled = wu;
    let mut imputed_rows = Vec::with_capacity(gap_rows.len());
    for (t, row) in gap_rows {
        filled[t] = Some(model.predict_row(&row));
        imputed_rows.push(t);
    }
    Ok(ImputationOutcome {
        frame: frame.with_values("WU", filled)?,
        imputed_rows,
        report,
        winner: Some(winner),
    })
}

#[derive(Debug)]
pub struct PreprocessOutcome {
    /// Input dataset with WU gaps filled where imputable.
    pub data: DataSet,
    /// Joined weather+sensor hourly frame per real group, in group order.
    pub joined: Vec<TimeSeriesFrame>,
    pub imputed_cells: u64,
}

/// Join weather and sensors per real group, imputing water-usage gaps
/// from the concurrent channels when any are present.
pub fn preprocess_groups(config: &PipelineConfig, data: &DataSet) -> Result<PreprocessOutcome> {
    let mut groups = Vec::new();
    let mut joined_frames = Vec::new();
    let mut imputed_cells = 0u64;
    for g in &data.groups {
        let mut g = g.clone();
        if let Some(sensors) = &g.sensors {
            if sensors
                .channel_index("WU")
                .map(|i| sensors.values_by_index(i).iter().any(|v| v.is_none()))
                .unwrap_or(false)
            {
                let joined = join_frames(&[&g.weather, sensors])?;
                let predictors: Vec<String> = joined
                    .channels()
                    .iter()
                    .map(|c| c.acronym.clone())
                    .filter(|a| a != "WU")
                    .collect();
                let outcome =
                    impute_water_usage(&joined, &predictors, &config.backcast, config.seed)?;
                imputed_cells += outcome.imputed_rows.len() as u64;
                let wu = outcome.frame.values("WU")?;
                g.sensors = Some(sensors.with_values("WU", wu.to_vec())?);
            }
            joined_frames.push(join_frames(&[&g.weather, g.sensors.as_ref().expect("real")])?);
        }
        groups.push(g);
    }
    Ok(PreprocessOutcome {
        data: DataSet { groups },
        joined: joined_frames,
        imputed_cells,
    })
}

/// Everything a rerun needs to prove bit-identical reproduction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub complete: bool,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub counts: BTreeMap<String, u64>,
    /// "site/target" -> selected backcast model variant.
    pub winners: BTreeMap<String, String>,
    /// Relative paths of every file the run wrote, sorted.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

struct OutputTracker {
    root: PathBuf,
    written: Vec<String>,
}

impl OutputTracker {
    fn path(&mut self, rel: &str) -> PathBuf {
        self.written.push(rel.to_string());
        self.root.join(rel)
    }
}

/// Execute preprocess -> correlate -> backcast -> synthesize -> yield
/// matrix, writing reports, models, plot data, and the manifest. The
/// manifest lands first (marked incomplete) so a crashed run is
/// detectable; it is finalized last.
pub fn run_full(config: &PipelineConfig, out: &Path, force: bool) -> Result<RunManifest> {
    config.validate()?;
    let manifest_path = out.join("manifest.json");
    if manifest_path.exists() {
        if !force {
            return Err(Error::WouldOverwrite(manifest_path));
        }
        std::fs::remove_dir_all(out)?;
    } else if out.exists() && out.read_dir()?.next().is_some() {
        return Err(Error::WouldOverwrite(out.to_path_buf()));
    }
    std::fs::create_dir_all(out)?;

    let mut manifest = RunManifest {
        complete: false,
        config_hash: config.hash(),
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        counts: BTreeMap::new(),
        winners: BTreeMap::new(),
        outputs: Vec::new(),
    };
    manifest.write(&manifest_path)?;

    let mut tracker = OutputTracker {
        root: out.to_path_buf(),
        written: vec!["manifest.json".to_string()],
    };

    // Stage: data.
    let data = load_or_generate_data(config).map_err(|e| e.in_stage("data"))?;
    for g in &data.groups {
        let rel = format!("data/weather_{}_{}.csv", g.site, g.season);
        write_frame(&g.weather, &tracker.path(&rel)).map_err(|e| e.in_stage("data"))?;
        if let Some(s) = &g.sensors {
            let rel = format!("data/sensors_{}_{}.csv", g.site, g.season);
            write_frame(s, &tracker.path(&rel)).map_err(|e| e.in_stage("data"))?;
        }
        if let Some(y) = &g.yields {
            let rel = format!("data/yield_{}_{}.csv", g.site, g.season);
            write_frame(y, &tracker.path(&rel)).map_err(|e| e.in_stage("data"))?;
        }
    }
    manifest
        .counts
        .insert("data.real_groups".into(), data.real_groups().count() as u64);
    manifest.counts.insert(
        "data.synthetic_groups".into(),
        data.synthetic_groups().count() as u64,
    );
    if let Some(world) = config.world_params() {
        let rel = "data/truth.json";
        world
            .write_truth_manifest(&tracker.path(rel))
            .map_err(|e| e.in_stage("data"))?;
    }

    // Stage: preprocess.
    let pre = preprocess_groups(config, &data).map_err(|e| e.in_stage("preprocess"))?;
    for joined in &pre.joined {
        let rel = format!("preprocess/joined_{}_{}.csv", joined.site(), joined.season());
        write_frame(joined, &tracker.path(&rel)).map_err(|e| e.in_stage("preprocess"))?;
    }
    let data = pre.data;
    manifest
        .counts
        .insert("preprocess.wu_imputed".into(), pre.imputed_cells);

    // Stage: correlate.
    for g in data.real_groups() {
        let joined = join_frames(&[&g.weather, g.sensors.as_ref().expect("real")])
            .map_err(|e| e.in_stage("correlate"))?;
        let channels: Vec<String> = joined.channels().iter().map(|c| c.acronym.clone()).collect();
        let matrix = correlation_matrix(&joined, &channels).map_err(|e| e.in_stage("correlate"))?;
        let rel = format!("correlate/{}_{}.csv", g.site, g.season);
        matrix
            .write_square_csv(&tracker.path(&rel))
            .map_err(|e| e.in_stage("correlate"))?;
    }

    // Stage: backcast.
    let outcome = run_backcast_training(config, &data).map_err(|e| e.in_stage("backcast"))?;
    outcome
        .report
        .write_csv(&tracker.path("backcast/report.csv"))
        .map_err(|e| e.in_stage("backcast"))?;
    for ((site, target), selection) in &outcome.winners {
        manifest
            .winners
            .insert(format!("{site}/{target}"), selection.model.to_string());
        let model = &outcome.models[&(site.clone(), target.clone())];
        let rel = format!("backcast/models/{site}_{target}.json");
        model.save(&tracker.path(&rel)).map_err(|e| e.in_stage("backcast"))?;
        let rel = format!("backcast/series/{site}_{target}.csv");
        write_series(&outcome.series[&(site.clone(), target.clone())], &tracker.path(&rel))
            .map_err(|e| e.in_stage("backcast"))?;
    }
    {
        let winners_json: BTreeMap<String, &Selection> = outcome
            .winners
            .iter()
            .map(|((s, t), sel)| (format!("{s}/{t}"), sel))
            .collect();
        let rel = "backcast/selected.json";
        std::fs::write(
            tracker.path(rel),
            serde_json::to_string_pretty(&winners_json).map_err(Error::from)?,
        )
        .map_err(|e| Error::from(e).in_stage("backcast"))?;
    }
    manifest
        .counts
        .insert("backcast.targets".into(), outcome.winners.len() as u64);

    // Stage: synthesize.
    let synthetic = generate_synthetic_seasons(config, &outcome, &data)
        .map_err(|e| e.in_stage("synthesize"))?;
    for frame in &synthetic.frames {
        let rel = format!("synthetic/sensors_{}_{}.csv", frame.site(), frame.season());
        write_frame(frame, &tracker.path(&rel)).map_err(|e| e.in_stage("synthesize"))?;
    }
    if !synthetic.frames.is_empty() {
        #[derive(Serialize)]
        struct SynthManifest<'a> {
            window: usize,
            model_keys: &'a BTreeMap<String, String>,
            missing: &'a BTreeMap<String, usize>,
        }
        let rel = "synthetic/manifest.json";
        std::fs::write(
            tracker.path(rel),
            serde_json::to_string_pretty(&SynthManifest {
                window: synthetic.window,
                model_keys: &synthetic.model_keys,
                missing: &synthetic.missing,
            })
            .map_err(Error::from)?,
        )
        .map_err(|e| Error::from(e).in_stage("synthesize"))?;
    }
    manifest
        .counts
        .insert("synthesize.frames".into(), synthetic.frames.len() as u64);

    // Stage: forecast.
    let yields = run_yield_experiment(config, &data, &synthetic).map_err(|e| e.in_stage("forecast"))?;
    yields
        .report_yield_only
        .write_csv(&tracker.path("forecast/report_yield_only_baseline.csv"))
        .map_err(|e| e.in_stage("forecast"))?;
    yields
        .report_same_feature
        .write_csv(&tracker.path("forecast/report_same_feature_baseline.csv"))
        .map_err(|e| e.in_stage("forecast"))?;
    std::fs::write(
        tracker.path("forecast/summary.txt"),
        yields.report_yield_only.summary(),
    )
    .map_err(|e| Error::from(e).in_stage("forecast"))?;
    manifest.counts.extend(yields.counts);

    // Finalize.
    manifest.complete = true;
    tracker.written.sort();
    tracker.written.dedup();
    manifest.outputs = tracker.written;
    manifest.write(&manifest_path)?;
    Ok(manifest)
}

fn write_series(points: &[SeriesPoint], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["timestamp", "actual", "rf", "gbdt", "xgb"])?;
    for p in points {
        w.write_record([
            p.timestamp.to_rfc3339_opts(SecondsFormat::Secs, true),
            format!("{}", p.actual),
            format!("{}", p.rf),
            format!("{}", p.gbdt),
            format!("{}", p.xgb),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, WorldConfig, WorldPreset};

    /// Small fast world: 2 sites x 2 real seasons of 4 weeks, one
    /// synthetic season, light learners.
    fn tiny_config(seed: u64) -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.seed = seed;
        c.data = DataConfig {
            world: Some(WorldConfig {
                preset: WorldPreset::TreeFriendly,
                season_days: 28,
                ..WorldConfig::default()
            }),
            frames: Vec::new(),
            synthetic_seasons: vec![2019],
        };
        c.backcast.window = 3;
        c.backcast.exogenous = vec!["MET".into(), "MEH".into(), "Rad".into(), "Pre".into()];
        c.backcast.targets = vec!["IT".into(), "IH".into(), "PAR".into()];
        c.backcast.forest.n_trees = 5;
        c.backcast.forest.tree.max_depth = 10;
        c.backcast.gbdt.n_rounds = 8;
        c.backcast.gbdt.learning_rate = 1.0;
        c.backcast.gbdt.max_depth = 12;
        c.backcast.xgb.n_rounds = 8;
        c.backcast.xgb.learning_rate = 1.0;
        c.backcast.xgb.max_depth = 12;
        c.forecast.pruned_sensors = vec!["IT".into(), "IH".into(), "PAR".into()];
        c.forecast.forest.n_trees = 10;
        c.forecast.gbdt.n_rounds = 10;
        c.forecast.xgb.n_rounds = 10;
        c
    }

    #[test]
    fn backcast_training_report_shape_and_consistency() {
        let c = tiny_config(5);
        let data = load_or_generate_data(&c).unwrap();
        let outcome = run_backcast_training(&c, &data).unwrap();
        // 2 sites x 3 targets x 3 models.
        assert_eq!(outcome.report.rows.len(), 18);
        assert_eq!(outcome.winners.len(), 6);
        // Winners recomputed from the report agree with what the
        // pipeline recorded.
        let reselected = outcome.report.select_best_per_target().unwrap();
        for (key, sel) in &outcome.winners {
            assert_eq!(reselected[key].model, sel.model, "{key:?}");
        }
        // The stored model is the winner's variant.
        for (key, sel) in &outcome.winners {
            assert_eq!(outcome.models[key].variant, sel.model);
        }
    }

    #[test]
    fn noiseless_tree_friendly_backcast_is_exact() {
        let c = tiny_config(11);
        let data = load_or_generate_data(&c).unwrap();
        let outcome = run_backcast_training(&c, &data).unwrap();
        for (key, sel) in &outcome.winners {
            assert!(sel.rmse < 1e-6, "{key:?}: rmse {}", sel.rmse);
        }
    }

    #[test]
    fn synthetic_seasons_match_ground_truth() {
        let c = tiny_config(13);
        let data = load_or_generate_data(&c).unwrap();
        let outcome = run_backcast_training(&c, &data).unwrap();
        let synthetic = generate_synthetic_seasons(&c, &outcome, &data).unwrap();
        assert_eq!(synthetic.frames.len(), 2); // one season x two sites
        for g in data.synthetic_groups() {
            let truth = g.truth_sensors.as_ref().unwrap();
            let synth = synthetic.get(&g.site, g.season).unwrap();
            for target in &c.backcast.targets {
                let tv = truth.values(target).unwrap();
                let sv = synth.values(target).unwrap();
                let mut missing = 0;
                for (t, (a, b)) in tv.iter().zip(sv).enumerate() {
                    match b {
                        Some(b) => assert!(
                            (a.unwrap() - b).abs() < 1e-6,
                            "{}/{}/{target} t={t}: truth {} pred {}",
                            g.site,
                            g.season,
                            a.unwrap(),
                            b
                        ),
                        None => missing += 1,
                    }
                }
                // Exactly the trailing W-1 anchors lack future weather.
                assert_eq!(missing, c.backcast.window - 1);
            }
        }
    }

    #[test]
    fn yield_experiment_counts_and_provenance() {
        let c = tiny_config(17);
        let data = load_or_generate_data(&c).unwrap();
        let outcome = run_backcast_training(&c, &data).unwrap();
        let synthetic = generate_synthetic_seasons(&c, &outcome, &data).unwrap();
        let yields = run_yield_experiment(&c, &data, &synthetic).unwrap();
        // 3 models x 4 feature sets x 2 data modes.
        assert_eq!(yields.report_yield_only.rows.len(), 24);
        // Augmentation adds exactly the synthetic groups' window count:
        // 2 groups x (4 weeks - 2) = 4.
        let real = yields.counts["forecast.train.real.yield+sensor"];
        let syn = yields.counts["forecast.train.syn+real.yield+sensor"];
        let syn_rows = yields.counts["forecast.train_synthetic.syn+real.yield+sensor"];
        assert_eq!(syn, real + syn_rows);
        assert_eq!(syn_rows, 4);
    }

    #[test]
    fn empty_synthetic_set_reproduces_real_only() {
        let c = tiny_config(19);
        let data = load_or_generate_data(&c).unwrap();
        // Drop the synthetic groups entirely.
        let real_only = DataSet {
            groups: data.groups.iter().filter(|g| g.sensors.is_some()).cloned().collect(),
        };
        let synthetic = SyntheticFrameSet::empty();
        let out = run_yield_experiment(&c, &real_only, &synthetic).unwrap();
        let rows = &out.report_yield_only.rows;
        for fs in &c.forecast.feature_sets {
            for model in [Variant::Rf, Variant::Gbdt, Variant::Xgb] {
                let real = rows
                    .iter()
                    .find(|r| r.model == model && r.subject == fs.name() && r.data_mode == DataMode::RealOnly)
                    .unwrap();
                let syn = rows
                    .iter()
                    .find(|r| r.model == model && r.subject == fs.name() && r.data_mode == DataMode::SynReal)
                    .unwrap();
                assert_eq!(real.rmse.to_bits(), syn.rmse.to_bits());
                assert_eq!(real.mae.to_bits(), syn.mae.to_bits());
            }
        }
    }

    #[test]
    fn impute_water_usage_fills_masked_cells_exactly() {
        let c = tiny_config(23);
        let world = c.world_params().unwrap();
        let weather = synthworld::generate_weather(&world, "seaton", 2021).unwrap();
        let (sensors, _) = synthworld::generate_polytunnel(&weather, &world).unwrap();
        let joined = join_frames(&[&weather, &sensors]).unwrap();
        let truth = joined.values("WU").unwrap().to_vec();
        // Mask 30% of WU.
        let mut masked = truth.clone();
        for (i, v) in masked.iter_mut().enumerate() {
            if i % 3 == 0 {
                *v = None;
            }
        }
        let gappy = joined.with_values("WU", masked).unwrap();
        let predictors: Vec<String> = gappy
            .channels()
            .iter()
            .map(|ch| ch.acronym.clone())
            .filter(|a| a != "WU")
            .collect();
        let out = impute_water_usage(&gappy, &predictors, &c.backcast, 3).unwrap();
        assert!(!out.imputed_rows.is_empty());
        assert!(out.winner.is_some());
        let filled = out.frame.values("WU").unwrap();
        for (a, b) in filled.iter().zip(&truth) {
            assert!((a.unwrap() - b.unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn impute_water_usage_without_gaps_is_identity() {
        let c = tiny_config(29);
        let world = c.world_params().unwrap();
        let weather = synthworld::generate_weather(&world, "seaton", 2021).unwrap();
        let (sensors, _) = synthworld::generate_polytunnel(&weather, &world).unwrap();
        let joined = join_frames(&[&weather, &sensors]).unwrap();
        let out = impute_water_usage(&joined, &["MET".into()], &c.backcast, 3).unwrap();
        assert_eq!(out.frame, joined);
        assert!(out.imputed_rows.is_empty());
        assert!(out.winner.is_none());
    }

    #[test]
    fn run_full_writes_complete_manifest_and_refuses_overwrite() {
        let c = tiny_config(31);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let manifest = run_full(&c, &out, false).unwrap();
        assert!(manifest.complete);
        assert_eq!(manifest.config_hash, c.hash());
        assert!(manifest.outputs.contains(&"backcast/report.csv".to_string()));
        let on_disk = RunManifest::load(&out.join("manifest.json")).unwrap();
        assert_eq!(on_disk, manifest);
        // Second run without --force refuses.
        assert!(matches!(
            run_full(&c, &out, false),
            Err(Error::WouldOverwrite(_))
        ));
        // With force it succeeds and reproduces the same manifest.
        let again = run_full(&c, &out, true).unwrap();
        assert_eq!(again, manifest);
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(1, &["x", "y"]);
        let b = derive_seed(1, &["xy"]);
        let c = derive_seed(1, &["x", "y", ""]);
        let d = derive_seed(2, &["x", "y"]);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
        assert_eq!(a, derive_seed(1, &["x", "y"]));
    }
}
