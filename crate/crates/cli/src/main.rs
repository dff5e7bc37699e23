//! `polycast`: batch command surface for the polytunnel yield toolkit.
//! Every subcommand reads a config file, writes files under --out, and
//! never touches the network. Exit codes: 0 success, 1 config/data
//! error, 2 usage error, 3 internal invariant violation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polycast_core::config::{FeatureSet, GroupRef, PipelineConfig};
use polycast_core::correlate::correlation_matrix;
use polycast_core::evaluate::{mae, rmse, DataMode};
use polycast_core::ingest::write_frame;
use polycast_core::pipeline::{
    generate_synthetic_seasons, load_or_generate_data, preprocess_groups, run_backcast_training,
    run_full, run_yield_experiment, BackcastOutcome, DataSet, PreprocessOutcome,
};
use polycast_core::Error;

#[derive(Parser)]
#[command(
    name = "polycast",
    version,
    about = "Backcast polytunnel sensor series from external weather and forecast weekly yield"
)]
struct Cli {
    /// Pipeline config file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; all written paths are relative to it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log verbosity: error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for intra-stage parallelism; results are
    /// independent of the value. 0 means one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate oracle world data (weather, sensors, yield, truth).
    Synthworld,
    /// Join weather and sensors per group, filling water-usage gaps.
    Preprocess,
    /// Write per-group Pearson correlation matrices.
    Correlate,
    /// Train backcasting models and write the selection report.
    Backcast,
    /// Reconstruct sensor series for seasons without hardware.
    Synthesize,
    /// Run the yield-forecast matrix over feature sets and data modes.
    Forecast {
        /// Restrict to these feature sets (repeatable):
        /// yield, yield+mo, yield+sensor, yield+sensor+mo.
        #[arg(long = "feature-set", value_parser = parse_feature_set)]
        feature_set: Vec<FeatureSet>,
        /// Restrict to these data modes (repeatable): real, syn+real.
        #[arg(long = "data-mode", value_parser = parse_data_mode)]
        data_mode: Vec<DataMode>,
        /// Held-out SITE:SEASON groups (repeatable); must be real seasons.
        #[arg(long, value_parser = parse_group)]
        holdout: Vec<GroupRef>,
    },
    /// Full pipeline: data, preprocess, correlate, backcast, synthesize,
    /// forecast, manifest.
    Run,
    /// Recompute RMSE/MAE from prediction series files.
    Evaluate {
        /// Prediction CSVs (timestamp, actual, rf, gbdt, xgb).
        #[arg(required = true)]
        predictions: Vec<PathBuf>,
    },
}

fn parse_feature_set(s: &str) -> Result<FeatureSet, String> {
    FeatureSet::ALL
        .iter()
        .find(|f| f.name() == s)
        .copied()
        .ok_or_else(|| format!("unknown feature set `{s}` (expected yield, yield+mo, yield+sensor, yield+sensor+mo)"))
}

fn parse_data_mode(s: &str) -> Result<DataMode, String> {
    match s {
        "real" => Ok(DataMode::RealOnly),
        "syn+real" => Ok(DataMode::SynReal),
        _ => Err(format!("unknown data mode `{s}` (expected real or syn+real)")),
    }
}

fn parse_group(s: &str) -> Result<GroupRef, String> {
    let (site, season) = s
        .split_once(':')
        .ok_or_else(|| format!("expected SITE:SEASON, got `{s}`"))?;
    let season: i32 = season
        .parse()
        .map_err(|_| format!("invalid season in `{s}`"))?;
    if site.is_empty() {
        return Err(format!("empty site in `{s}`"));
    }
    Ok(GroupRef {
        site: site.to_string(),
        season,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: failed to configure thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    // A panic anywhere below is an internal invariant violation.
    match std::panic::catch_unwind(move || dispatch(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(1)
        }
        Err(_) => {
            eprintln!("error: internal invariant violation (panic); this is a bug");
            ExitCode::from(3)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config {
        field: "--config".to_string(),
        message: "this subcommand requires a config file".to_string(),
    })?;
    let mut config = PipelineConfig::from_path(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

/// Refuse to write into `rel` under --out unless --force is given.
fn guarded(cli: &Cli, rel: &str) -> Result<PathBuf, Error> {
    let path = cli.out.join(rel);
    if path.exists() && !cli.force {
        return Err(Error::WouldOverwrite(path));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(path)
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Synthworld => cmd_synthworld(cli),
        Command::Preprocess => cmd_preprocess(cli),
        Command::Correlate => cmd_correlate(cli),
        Command::Backcast => cmd_backcast(cli),
        Command::Synthesize => cmd_synthesize(cli),
        Command::Forecast {
            feature_set,
            data_mode,
            holdout,
        } => cmd_forecast(cli, feature_set, data_mode, holdout),
        Command::Run => {
            let config = load_config(cli)?;
            let manifest = run_full(&config, &cli.out, cli.force)?;
            log::info!(
                "run complete: {} outputs, config {}",
                manifest.outputs.len(),
                manifest.config_hash
            );
            Ok(())
        }
        Command::Evaluate { predictions } => cmd_evaluate(cli, predictions),
    }
}

fn stage_data(cli: &Cli) -> Result<(PipelineConfig, DataSet), Error> {
    let config = load_config(cli)?;
    let data = load_or_generate_data(&config).map_err(|e| e.in_stage("data"))?;
    Ok((config, data))
}

fn cmd_synthworld(cli: &Cli) -> Result<(), Error> {
    let (config, data) = stage_data(cli)?;
    let world = config.world_params().ok_or_else(|| Error::Config {
        field: "data.world".to_string(),
        message: "`synthworld` requires a generated-world config".to_string(),
    })?;
    for g in &data.groups {
        write_frame(
            &g.weather,
            &guarded(cli, &format!("data/weather_{}_{}.csv", g.site, g.season))?,
        )?;
        if let Some(s) = &g.sensors {
            write_frame(
                s,
                &guarded(cli, &format!("data/sensors_{}_{}.csv", g.site, g.season))?,
            )?;
        }
        if let Some(y) = &g.yields {
            write_frame(
                y,
                &guarded(cli, &format!("data/yield_{}_{}.csv", g.site, g.season))?,
            )?;
        }
    }
    world.write_truth_manifest(&guarded(cli, "data/truth.json")?)?;
    Ok(())
}

fn stage_preprocess(cli: &Cli) -> Result<(PipelineConfig, PreprocessOutcome), Error> {
    let (config, data) = stage_data(cli)?;
    let pre = preprocess_groups(&config, &data).map_err(|e| e.in_stage("preprocess"))?;
    Ok((config, pre))
}

fn cmd_preprocess(cli: &Cli) -> Result<(), Error> {
    let (_, pre) = stage_preprocess(cli)?;
    for joined in &pre.joined {
        let rel = format!("preprocess/joined_{}_{}.csv", joined.site(), joined.season());
        write_frame(joined, &guarded(cli, &rel)?)?;
    }
    log::info!("imputed {} water-usage cells", pre.imputed_cells);
    Ok(())
}

fn cmd_correlate(cli: &Cli) -> Result<(), Error> {
    let (_, pre) = stage_preprocess(cli)?;
    for joined in &pre.joined {
        let channels: Vec<String> = joined
            .channels()
            .iter()
            .map(|c| c.acronym.clone())
            .collect();
        let matrix = correlation_matrix(joined, &channels).map_err(|e| e.in_stage("correlate"))?;
        let rel = format!("correlate/{}_{}.csv", joined.site(), joined.season());
        matrix.write_square_csv(&guarded(cli, &rel)?)?;
    }
    Ok(())
}

fn stage_backcast(cli: &Cli) -> Result<(PipelineConfig, DataSet, BackcastOutcome), Error> {
    let (config, pre) = stage_preprocess(cli)?;
    let outcome = run_backcast_training(&config, &pre.data).map_err(|e| e.in_stage("backcast"))?;
    Ok((config, pre.data, outcome))
}

fn cmd_backcast(cli: &Cli) -> Result<(), Error> {
    let (_, _, outcome) = stage_backcast(cli)?;
    outcome.report.write_csv(&guarded(cli, "backcast/report.csv")?)?;
    let mut winners = std::collections::BTreeMap::new();
    for ((site, target), selection) in &outcome.winners {
        winners.insert(format!("{site}/{target}"), selection);
        let key = (site.clone(), target.clone());
        outcome.models[&key].save(&guarded(cli, &format!("backcast/models/{site}_{target}.json"))?)?;
        write_series(
            &outcome.series[&key],
            &guarded(cli, &format!("backcast/series/{site}_{target}.csv"))?,
        )?;
    }
    std::fs::write(
        guarded(cli, "backcast/selected.json")?,
        serde_json_pretty(&winners)?,
    )?;
    Ok(())
}

fn cmd_synthesize(cli: &Cli) -> Result<(), Error> {
    let (config, data, outcome) = stage_backcast(cli)?;
    let synthetic =
        generate_synthetic_seasons(&config, &outcome, &data).map_err(|e| e.in_stage("synthesize"))?;
    for frame in &synthetic.frames {
        let rel = format!("synthetic/sensors_{}_{}.csv", frame.site(), frame.season());
        write_frame(frame, &guarded(cli, &rel)?)?;
    }
    log::info!("synthesized {} season frames", synthetic.frames.len());
    Ok(())
}

fn cmd_forecast(
    cli: &Cli,
    feature_sets: &[FeatureSet],
    data_modes: &[DataMode],
    holdout: &[GroupRef],
) -> Result<(), Error> {
    let (mut config, data, outcome) = stage_backcast(cli)?;
    if !feature_sets.is_empty() {
        config.forecast.feature_sets = feature_sets.to_vec();
    }
    if !data_modes.is_empty() {
        config.forecast.data_modes = data_modes.to_vec();
    }
    if !holdout.is_empty() {
        config.forecast.holdout = holdout.to_vec();
    }
    config.validate()?;
    let synthetic =
        generate_synthetic_seasons(&config, &outcome, &data).map_err(|e| e.in_stage("synthesize"))?;
    let yields =
        run_yield_experiment(&config, &data, &synthetic).map_err(|e| e.in_stage("forecast"))?;
    yields
        .report_yield_only
        .write_csv(&guarded(cli, "forecast/report_yield_only_baseline.csv")?)?;
    yields
        .report_same_feature
        .write_csv(&guarded(cli, "forecast/report_same_feature_baseline.csv")?)?;
    std::fs::write(
        guarded(cli, "forecast/summary.txt")?,
        yields.report_yield_only.summary(),
    )?;
    Ok(())
}

fn cmd_evaluate(cli: &Cli, predictions: &[PathBuf]) -> Result<(), Error> {
    let out = guarded(cli, "evaluate/report.csv")?;
    let mut w = csv::Writer::from_path(&out).map_err(Error::from)?;
    w.write_record(["file", "model", "rmse", "mae", "n"])
        .map_err(Error::from)?;
    for path in predictions {
        let (actual, columns) = read_series(path)?;
        for (model, pred) in &columns {
            let r = rmse(pred, &actual)?;
            let m = mae(pred, &actual)?;
            w.write_record([
                path.display().to_string(),
                model.clone(),
                format!("{r}"),
                format!("{m}"),
                format!("{}", actual.len()),
            ])
            .map_err(Error::from)?;
        }
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

/// Read a prediction series CSV: first column timestamp, second the
/// actuals, remaining columns one prediction series per model.
fn read_series(path: &Path) -> Result<(Vec<f64>, Vec<(String, Vec<f64>)>), Error> {
    let mut reader = csv::Reader::from_path(path).map_err(Error::from)?;
    let headers = reader.headers().map_err(Error::from)?.clone();
    if headers.len() < 3 || headers.get(1) != Some("actual") {
        return Err(Error::InvalidDataset(format!(
            "`{}`: expected columns timestamp, actual, <model>...",
            path.display()
        )));
    }
    let models: Vec<String> = headers.iter().skip(2).map(|h| h.to_string()).collect();
    let mut actual = Vec::new();
    let mut columns: Vec<(String, Vec<f64>)> =
        models.into_iter().map(|m| (m, Vec::new())).collect();
    for record in reader.records() {
        let record = record.map_err(Error::from)?;
        let parse = |i: usize| -> Result<f64, Error> {
            record
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    Error::InvalidDataset(format!(
                        "`{}`: bad numeric field in column {i}",
                        path.display()
                    ))
                })
        };
        actual.push(parse(1)?);
        for (j, (_, col)) in columns.iter_mut().enumerate() {
            col.push(parse(j + 2)?);
        }
    }
    if actual.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok((actual, columns))
}

fn write_series(
    points: &[polycast_core::pipeline::SeriesPoint],
    path: &Path,
) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    w.write_record(["timestamp", "actual", "rf", "gbdt", "xgb"])
        .map_err(Error::from)?;
    for p in points {
        w.write_record([
            p.timestamp
                .to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            format!("{}", p.actual),
            format!("{}", p.rf),
            format!("{}", p.gbdt),
            format!("{}", p.xgb),
        ])
        .map_err(Error::from)?;
    }
    w.flush().map_err(Error::from)?;
    Ok(())
}

fn serde_json_pretty<T: serde::Serialize>(value: &T) -> Result<String, Error> {
    serde_json::to_string_pretty(value).map_err(Error::from)
}
