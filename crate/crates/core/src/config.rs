//! Pipeline configuration: a single TOML document with sections for the
//! data source, the backcast stage, and the yield-forecast stage.
//! Unknown keys are rejected so config drift is caught at load time.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{BoostParams, ForestParams, TreeParams};
use crate::error::{Error, Result};
use crate::evaluate::DataMode;
use crate::synthworld::{self, ResponseMode, WorldParams};
use crate::windowing::SplitPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every stage derives its streams from it.
    pub seed: u64,
    pub data: DataConfig,
    pub backcast: BackcastConfig,
    pub forecast: ForecastConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            data: DataConfig::default(),
            backcast: BackcastConfig::default(),
            forecast: ForecastConfig::default(),
        }
    }
}

/// Where frames come from: either a generated world or files on disk.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub world: Option<WorldConfig>,
    pub frames: Vec<FrameEntry>,
    /// Seasons with weather (and yield) but no deployed sensors; their
    /// sensor series are reconstructed by the selected backcast models.
    pub synthetic_seasons: Vec<i32>,
}

/// Compact world selector; materialized into full [`WorldParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub preset: WorldPreset,
    /// Gaussian observation noise added to every sensor channel.
    pub sensor_noise_std: f64,
    pub n_seasons: usize,
    pub season_days: u32,
    pub first_season: i32,
    pub sites: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorldPreset {
    TreeFriendly,
    Smooth,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            preset: WorldPreset::TreeFriendly,
            sensor_noise_std: 0.0,
            n_seasons: 2,
            season_days: 42,
            first_season: 2021,
            sites: synthworld::SITES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl WorldConfig {
    pub fn materialize(&self, seed: u64) -> WorldParams {
        let mut params = match self.preset {
            WorldPreset::TreeFriendly => WorldParams::tree_friendly(seed),
            WorldPreset::Smooth => WorldParams::smooth(seed),
        };
        if self.sensor_noise_std > 0.0 {
            params = params.with_sensor_noise(self.sensor_noise_std);
        }
        params.n_seasons = self.n_seasons;
        params.season_days = self.season_days;
        params.first_season = self.first_season;
        params
    }
}

/// One on-disk (site, season) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub site: String,
    pub season: i32,
    pub weather: PathBuf,
    pub sensors: Option<PathBuf>,
    #[serde(rename = "yield")]
    pub yield_frame: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackcastConfig {
    /// W: number of consecutive future weather readings per window.
    pub window: usize,
    pub exogenous: Vec<String>,
    pub targets: Vec<String>,
    pub train_fraction: f64,
    pub split: SplitPolicy,
    /// (a1, a2) feature normalization interval.
    pub normalization: (f64, f64),
    pub forest: ForestParams,
    pub gbdt: BoostParams,
    pub xgb: BoostParams,
}

impl Default for BackcastConfig {
    fn default() -> Self {
        BackcastConfig {
            window: 6,
            exogenous: synthworld::EXOGENOUS.iter().map(|s| s.to_string()).collect(),
            targets: synthworld::BACKCAST_TARGETS.iter().map(|s| s.to_string()).collect(),
            train_fraction: 0.85,
            split: SplitPolicy::Shuffled,
            normalization: (-1.0, 1.0),
            forest: ForestParams {
                n_trees: 30,
                bootstrap: true,
                feature_subsample: None,
                tree: TreeParams {
                    max_depth: 14,
                    min_samples_leaf: 1,
                    min_split_gain: 0.0,
                    feature_subsample: crate::ensemble::FeatureSubsample::All,
                },
                seed: 0,
            },
            gbdt: BoostParams {
                n_rounds: 30,
                learning_rate: 0.5,
                max_depth: 14,
                min_samples_leaf: 1,
                l2_lambda: 0.0,
                min_split_gain: 0.0,
                early_stopping_patience: None,
                validation_fraction: 0.1,
                seed: 0,
            },
            xgb: BoostParams {
                n_rounds: 30,
                learning_rate: 0.5,
                max_depth: 14,
                min_samples_leaf: 1,
                l2_lambda: 0.0,
                min_split_gain: 0.0,
                early_stopping_patience: None,
                validation_fraction: 0.1,
                seed: 0,
            },
        }
    }
}

/// The four input configurations of the yield matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureSet {
    #[serde(rename = "yield")]
    Yield,
    #[serde(rename = "yield+mo")]
    YieldMo,
    #[serde(rename = "yield+sensor")]
    YieldSensor,
    #[serde(rename = "yield+sensor+mo")]
    YieldSensorMo,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 4] = [
        FeatureSet::Yield,
        FeatureSet::YieldMo,
        FeatureSet::YieldSensor,
        FeatureSet::YieldSensorMo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::Yield => "yield",
            FeatureSet::YieldMo => "yield+mo",
            FeatureSet::YieldSensor => "yield+sensor",
            FeatureSet::YieldSensorMo => "yield+sensor+mo",
        }
    }

    pub fn uses_sensors(self) -> bool {
        matches!(self, FeatureSet::YieldSensor | FeatureSet::YieldSensorMo)
    }

    pub fn uses_weather(self) -> bool {
        matches!(self, FeatureSet::YieldMo | FeatureSet::YieldSensorMo)
    }
}

impl std::fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRef {
    pub site: String,
    pub season: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    pub feature_sets: Vec<FeatureSet>,
    pub data_modes: Vec<DataMode>,
    /// Sensor subset used whenever a feature set includes sensors.
    pub pruned_sensors: Vec<String>,
    /// Held-out (site, season) groups; empty means "last real season at
    /// every site".
    pub holdout: Vec<GroupRef>,
    pub forest: ForestParams,
    pub gbdt: BoostParams,
    pub xgb: BoostParams,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        let tree = TreeParams {
            max_depth: 4,
            min_samples_leaf: 2,
            min_split_gain: 0.0,
            feature_subsample: crate::ensemble::FeatureSubsample::All,
        };
        ForecastConfig {
            feature_sets: FeatureSet::ALL.to_vec(),
            data_modes: vec![DataMode::RealOnly, DataMode::SynReal],
            pruned_sensors: ["IT", "IH", "SM", "PAR"].iter().map(|s| s.to_string()).collect(),
            holdout: Vec::new(),
            forest: ForestParams {
                n_trees: 60,
                bootstrap: true,
                feature_subsample: None,
                tree: tree.clone(),
                seed: 0,
            },
            gbdt: BoostParams {
                n_rounds: 60,
                learning_rate: 0.1,
                max_depth: 3,
                min_samples_leaf: 2,
                l2_lambda: 0.0,
                min_split_gain: 0.0,
                early_stopping_patience: None,
                validation_fraction: 0.1,
                seed: 0,
            },
            xgb: BoostParams {
                n_rounds: 60,
                learning_rate: 0.1,
                max_depth: 3,
                min_samples_leaf: 2,
                l2_lambda: 1.0,
                min_split_gain: 0.0,
                early_stopping_patience: None,
                validation_fraction: 0.1,
                seed: 0,
            },
        }
    }
}

impl PipelineConfig {
    pub fn from_path(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)?;
        let config: PipelineConfig = toml::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let field_err = |field: &str, message: String| Error::Config {
            field: field.to_string(),
            message,
        };
        match (&self.data.world, self.data.frames.is_empty()) {
            (None, true) => {
                return Err(field_err(
                    "data",
                    "either a [data.world] section or [[data.frames]] entries are required".into(),
                ))
            }
            (Some(_), false) => {
                return Err(field_err(
                    "data",
                    "world generation and frame files are mutually exclusive".into(),
                ))
            }
            _ => {}
        }
        if let Some(world) = &self.data.world {
            world.materialize(self.seed).validate()?;
            if world.sites.is_empty() {
                return Err(field_err("data.world.sites", "at least one site".into()));
            }
            let real: BTreeSet<i32> = (0..world.n_seasons as i32)
                .map(|i| world.first_season + i)
                .collect();
            for s in &self.data.synthetic_seasons {
                if real.contains(s) {
                    return Err(field_err(
                        "data.synthetic_seasons",
                        format!("season {s} already has real sensor data"),
                    ));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for f in &self.data.frames {
            if !seen.insert((f.site.clone(), f.season)) {
                return Err(field_err(
                    "data.frames",
                    format!("duplicate entry for {}:{}", f.site, f.season),
                ));
            }
        }
        let b = &self.backcast;
        if b.window == 0 {
            return Err(field_err("backcast.window", "must be >= 1".into()));
        }
        if !(b.train_fraction > 0.0 && b.train_fraction < 1.0) {
            return Err(field_err(
                "backcast.train_fraction",
                format!("{} outside (0, 1)", b.train_fraction),
            ));
        }
        if b.normalization.0 >= b.normalization.1 {
            return Err(field_err(
                "backcast.normalization",
                "interval must have a1 < a2".into(),
            ));
        }
        let overlap: Vec<&String> = b.exogenous.iter().filter(|e| b.targets.contains(e)).collect();
        if !overlap.is_empty() {
            return Err(field_err(
                "backcast.exogenous",
                format!("channels {overlap:?} also listed as targets"),
            ));
        }
        if b.exogenous.is_empty() || b.targets.is_empty() {
            return Err(field_err(
                "backcast",
                "exogenous and target lists must be non-empty".into(),
            ));
        }
        if self.forecast.feature_sets.is_empty() || self.forecast.data_modes.is_empty() {
            return Err(field_err(
                "forecast",
                "feature_sets and data_modes must be non-empty".into(),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialized config; recorded in run
    /// manifests so reruns can prove they used identical settings.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Materialized world params when the config generates its data.
    pub fn world_params(&self) -> Option<WorldParams> {
        self.data.world.as_ref().map(|w| w.materialize(self.seed))
    }

    /// Held-out groups, applying the "last real season everywhere"
    /// default for world-backed configs.
    pub fn holdout_groups(&self) -> Vec<(String, i32)> {
        if !self.forecast.holdout.is_empty() {
            return self
                .forecast
                .holdout
                .iter()
                .map(|g| (g.site.clone(), g.season))
                .collect();
        }
        match &self.data.world {
            Some(w) => {
                let last = w.first_season + w.n_seasons as i32 - 1;
                w.sites.iter().map(|s| (s.clone(), last)).collect()
            }
            None => {
                let last = self.data.frames.iter().map(|f| f.season).max();
                match last {
                    Some(season) => {
                        let mut sites: Vec<String> = self
                            .data
                            .frames
                            .iter()
                            .filter(|f| f.season == season)
                            .map(|f| f.site.clone())
                            .collect();
                        sites.dedup();
                        sites.into_iter().map(|s| (s, season)).collect()
                    }
                    None => Vec::new(),
                }
            }
        }
    }
}

/// Response mode actually in effect for a config (None for file data).
pub fn effective_mode(config: &PipelineConfig) -> Option<ResponseMode> {
    config.world_params().map(|w| w.mode)
}
