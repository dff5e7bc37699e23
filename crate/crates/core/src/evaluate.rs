//! Error metrics, improvement percentages, and per-target model
//! selection for the backcast and yield reports.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::Variant;
use crate::error::{Error, Result};

fn check_pair(predicted: &[f64], actual: &[f64]) -> Result<()> {
    if predicted.is_empty() {
        return Err(Error::EmptyInput);
    }
    if predicted.len() != actual.len() {
        return Err(Error::LengthMismatch(predicted.len(), actual.len()));
    }
    Ok(())
}

/// Neumaier compensated sum; keeps metric arithmetic stable on
/// hourly-scale vectors (N well past 10^4).
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Root mean squared error.
pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(predicted, actual)?;
    let sse = compensated_sum(
        predicted
            .iter()
            .zip(actual)
            .map(|(p, a)| (p - a) * (p - a)),
    );
    Ok((sse / predicted.len() as f64).sqrt())
}

/// Mean absolute error.
pub fn mae(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(predicted, actual)?;
    let sae = compensated_sum(predicted.iter().zip(actual).map(|(p, a)| (p - a).abs()));
    Ok(sae / predicted.len() as f64)
}

/// Percentage improvement of `value` over `baseline`; negative when the
/// value is worse.
pub fn improvement_pct(baseline: f64, value: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::NonpositiveBaseline(baseline));
    }
    Ok(100.0 * (baseline - value) / baseline)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataMode {
    RealOnly,
    SynReal,
}

impl fmt::Display for DataMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataMode::RealOnly => "real",
            DataMode::SynReal => "syn+real",
        })
    }
}

/// Which real-only row a syn+real cell is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselinePolicy {
    /// Same model, real-only data, yield-only feature set.
    YieldOnlyBaseline,
    /// Same model, real-only data, same feature set.
    SameFeatureBaseline,
}

pub const YIELD_ONLY_SUBJECT: &str = "yield";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub pct: f64,
    /// Key of the row the percentage is relative to.
    pub baseline_key: String,
}

/// One report cell. `subject` is the backcast target channel or the
/// yield feature-set name; `site` is the site or group label ("" for
/// pooled yield runs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: Variant,
    pub site: String,
    pub subject: String,
    pub data_mode: DataMode,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
    pub rmse_improvement: Option<Improvement>,
    pub mae_improvement: Option<Improvement>,
}

impl EvalRow {
    pub fn new(
        model: Variant,
        site: impl Into<String>,
        subject: impl Into<String>,
        data_mode: DataMode,
        rmse: f64,
        mae: f64,
        n: usize,
    ) -> EvalRow {
        EvalRow {
            model,
            site: site.into(),
            subject: subject.into(),
            data_mode,
            rmse,
            mae,
            n,
            rmse_improvement: None,
            mae_improvement: None,
        }
    }

    pub fn key(&self) -> String {
        format!("{}/{}/{}/{}", self.model, self.site, self.subject, self.data_mode)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub model: Variant,
    pub rmse: f64,
    /// True when another candidate matched the winning RMSE exactly.
    pub tie: bool,
}

const CANDIDATES: [Variant; 3] = [Variant::Rf, Variant::Gbdt, Variant::Xgb];

impl EvalReport {
    pub fn push(&mut self, row: EvalRow) {
        self.rows.push(row);
    }

    pub fn validate(&self) -> Result<()> {
        let keys: std::collections::BTreeSet<String> =
            self.rows.iter().map(|r| r.key()).collect();
        for row in &self.rows {
            if !(row.rmse >= row.mae && row.mae >= 0.0) {
                return Err(Error::InvalidDataset(format!(
                    "row {} violates RMSE >= MAE >= 0 ({} vs {})",
                    row.key(),
                    row.rmse,
                    row.mae
                )));
            }
            for imp in [&row.rmse_improvement, &row.mae_improvement].into_iter().flatten() {
                if !keys.contains(&imp.baseline_key) {
                    return Err(Error::InvalidDataset(format!(
                        "row {} references missing baseline {}",
                        row.key(),
                        imp.baseline_key
                    )));
                }
            }
        }
        Ok(())
    }

    fn find(&self, model: Variant, site: &str, subject: &str, mode: DataMode) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.site == site && r.subject == subject && r.data_mode == mode)
    }

    /// Annotate every syn+real row whose baseline row exists under the
    /// given policy. Percentages are computed per metric (RMSE against
    /// baseline RMSE, MAE against baseline MAE).
    pub fn annotate_improvements(&mut self, policy: BaselinePolicy) -> Result<()> {
        let snapshot = self.clone();
        for row in &mut self.rows {
            if row.data_mode != DataMode::SynReal {
                continue;
            }
            let baseline_subject = match policy {
                BaselinePolicy::YieldOnlyBaseline => YIELD_ONLY_SUBJECT,
                BaselinePolicy::SameFeatureBaseline => row.subject.as_str(),
            };
            let Some(base) = snapshot.find(row.model, &row.site, baseline_subject, DataMode::RealOnly)
            else {
                continue;
            };
            row.rmse_improvement = Some(Improvement {
                pct: improvement_pct(base.rmse, row.rmse)?,
                baseline_key: base.key(),
            });
            row.mae_improvement = Some(Improvement {
                pct: improvement_pct(base.mae, row.mae)?,
                baseline_key: base.key(),
            });
        }
        Ok(())
    }

    /// Per-(site, subject) argmin of RMSE over the fixed candidate
    /// order RF, GBDT, XGB; exact ties keep the earlier candidate and
    /// are recorded.
    pub fn select_best_per_target(&self) -> Result<BTreeMap<(String, String), Selection>> {
        let mut groups: BTreeMap<(String, String), Vec<&EvalRow>> = BTreeMap::new();
        for row in &self.rows {
            groups
                .entry((row.site.clone(), row.subject.clone()))
                .or_default()
                .push(row);
        }
        let mut out = BTreeMap::new();
        for ((site, subject), rows) in groups {
            let mut per_model: Vec<(Variant, f64)> = Vec::new();
            let mut missing = Vec::new();
            for cand in CANDIDATES {
                match rows.iter().find(|r| r.model == cand) {
                    Some(r) => per_model.push((cand, r.rmse)),
                    None => missing.push(cand.to_string()),
                }
            }
            if !missing.is_empty() {
                return Err(Error::MissingCandidates {
                    target: format!("{site}/{subject}"),
                    missing,
                });
            }
            let (mut winner, mut best) = per_model[0];
            let mut tie = false;
            for &(cand, r) in &per_model[1..] {
                if r < best {
                    winner = cand;
                    best = r;
                    tie = false;
                } else if r == best {
                    tie = true;
                }
            }
            out.insert((site, subject), Selection { model: winner, rmse: best, tie });
        }
        Ok(out)
    }

    /// CSV mirroring the report tables: model, site, subject, data-mode,
    /// rmse, mae, n, improvements and the baseline keys they reference.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "model",
            "site",
            "subject",
            "data_mode",
            "rmse",
            "mae",
            "n",
            "rmse_improvement_pct",
            "mae_improvement_pct",
            "baseline_key",
        ])?;
        let opt = |i: &Option<Improvement>| i.as_ref().map(|v| format!("{}", v.pct)).unwrap_or_default();
        for row in &self.rows {
            let baseline = row
                .rmse_improvement
                .as_ref()
                .or(row.mae_improvement.as_ref())
                .map(|i| i.baseline_key.clone())
                .unwrap_or_default();
            w.write_record([
                row.model.to_string(),
                row.site.clone(),
                row.subject.clone(),
                row.data_mode.to_string(),
                format!("{}", row.rmse),
                format!("{}", row.mae),
                row.n.to_string(),
                opt(&row.rmse_improvement),
                opt(&row.mae_improvement),
                baseline,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Human-readable summary, one line per row.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&format!(
                "{:<5} {:<12} {:<18} {:<9} rmse={:<12.6} mae={:<12.6} n={}",
                row.model.to_string(),
                row.site,
                row.subject,
                row.data_mode.to_string(),
                row.rmse,
                row.mae,
                row.n
            ));
            if let Some(i) = &row.rmse_improvement {
                out.push_str(&format!("  rmse vs {}: {:+.2}%", i.baseline_key, i.pct));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmse_mae_fixtures() {
        let p = [2.0, 4.0];
        let a = [1.0, 2.0];
        assert!((rmse(&p, &a).unwrap() - 2.5_f64.sqrt()).abs() < 1e-15);
        assert_eq!(mae(&p, &a).unwrap(), 1.5);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_abs_offset() {
        let a: Vec<f64> = (0..50).map(|i| i as f64 * 0.3).collect();
        for c in [-2.5, 0.75] {
            let p: Vec<f64> = a.iter().map(|v| v + c).collect();
            assert!((rmse(&p, &a).unwrap() - c.abs()).abs() < 1e-12);
            assert!((mae(&p, &a).unwrap() - c.abs()).abs() < 1e-12);
        }
    }

    #[test]
    fn sign_flip_leaves_mae_unchanged() {
        let a = [1.0, 2.0, 3.0];
        let p1 = [1.5, 2.5, 3.5];
        let p2 = [0.5, 1.5, 2.5];
        assert_eq!(mae(&p1, &a).unwrap(), mae(&p2, &a).unwrap());
    }

    #[test]
    fn rmse_dominates_mae_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.gen_range(1..500);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let r = rmse(&p, &a).unwrap();
            let m = mae(&p, &a).unwrap();
            assert!(r >= m - 1e-12);
        }
    }

    #[test]
    fn metrics_invariant_under_common_permutation() {
        let a = [1.0, 5.0, -2.0, 3.0];
        let p = [1.5, 4.0, -2.5, 3.5];
        let ar = [3.0, -2.0, 5.0, 1.0];
        let pr = [3.5, -2.5, 4.0, 1.5];
        assert_eq!(rmse(&p, &a).unwrap(), rmse(&pr, &ar).unwrap());
        assert_eq!(mae(&p, &a).unwrap(), mae(&pr, &ar).unwrap());
    }

    #[test]
    fn metric_errors() {
        assert!(matches!(rmse(&[], &[]), Err(Error::EmptyInput)));
        assert!(matches!(
            mae(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn improvement_fixtures() {
        assert!((improvement_pct(0.1464, 0.1260).unwrap() - 13.93).abs() < 0.01);
        assert!((improvement_pct(0.2098, 0.1218).unwrap() - 41.9).abs() < 0.1);
        assert_eq!(improvement_pct(0.5, 0.5).unwrap(), 0.0);
        assert!(improvement_pct(0.5, 0.6).unwrap() < 0.0);
        assert!(matches!(
            improvement_pct(0.0, 0.1),
            Err(Error::NonpositiveBaseline(_))
        ));
    }

    fn backcast_report(cells: &[(&str, &str, [f64; 3])]) -> EvalReport {
        let mut report = EvalReport::default();
        for (site, target, rmses) in cells {
            for (model, r) in CANDIDATES.into_iter().zip(rmses) {
                report.push(EvalRow::new(model, *site, *target, DataMode::RealOnly, *r, r * 0.8, 100));
            }
        }
        report
    }

    #[test]
    fn selection_picks_lowest_rmse() {
        let report = backcast_report(&[
            ("multispan", "WU", [11.118, 11.214, 11.256]),
            ("multispan", "ST", [3.1, 2.866, 2.885]),
            ("seaton", "PAR", [304.642, 308.644, 301.045]),
        ]);
        let sel = report.select_best_per_target().unwrap();
        assert_eq!(sel[&("multispan".into(), "WU".into())].model, Variant::Rf);
        assert_eq!(sel[&("multispan".into(), "ST".into())].model, Variant::Gbdt);
        assert_eq!(sel[&("seaton".into(), "PAR".into())].model, Variant::Xgb);
        assert!(!sel[&("multispan".into(), "WU".into())].tie);
    }

    #[test]
    fn selection_records_ties_with_fixed_order() {
        let report = backcast_report(&[("s", "t", [2.0, 2.0, 3.0])]);
        let sel = report.select_best_per_target().unwrap();
        let s = &sel[&("s".into(), "t".into())];
        assert_eq!(s.model, Variant::Rf);
        assert!(s.tie);
    }

    #[test]
    fn selection_rejects_missing_candidates() {
        let mut report = EvalReport::default();
        report.push(EvalRow::new(Variant::Rf, "s", "t", DataMode::RealOnly, 1.0, 0.5, 10));
        assert!(matches!(
            report.select_best_per_target(),
            Err(Error::MissingCandidates { .. })
        ));
    }

    #[test]
    fn validate_rejects_mae_above_rmse() {
        let mut report = EvalReport::default();
        report.push(EvalRow::new(Variant::Rf, "s", "t", DataMode::RealOnly, 0.5, 0.6, 10));
        assert!(report.validate().is_err());
    }

    fn yield_table_fixture() -> EvalReport {
        // (model, mode, feature set, rmse, mae) grid for a published-style
        // yield comparison table.
        let cells: &[(Variant, DataMode, &str, f64, f64)] = &[
            (Variant::Rf, DataMode::RealOnly, "yield", 0.1464, 0.0940),
            (Variant::Rf, DataMode::RealOnly, "yield+mo", 0.1675, 0.1140),
            (Variant::Rf, DataMode::RealOnly, "yield+sensor", 0.1668, 0.1137),
            (Variant::Rf, DataMode::RealOnly, "yield+sensor+mo", 0.1658, 0.1147),
            (Variant::Rf, DataMode::SynReal, "yield", 0.1321, 0.0957),
            (Variant::Rf, DataMode::SynReal, "yield+mo", 0.1404, 0.1088),
            (Variant::Rf, DataMode::SynReal, "yield+sensor", 0.1260, 0.0961),
            (Variant::Rf, DataMode::SynReal, "yield+sensor+mo", 0.1363, 0.1049),
            (Variant::Gbdt, DataMode::RealOnly, "yield", 0.1514, 0.1032),
            (Variant::Gbdt, DataMode::RealOnly, "yield+mo", 0.1801, 0.1321),
            (Variant::Gbdt, DataMode::RealOnly, "yield+sensor", 0.2098, 0.1446),
            (Variant::Gbdt, DataMode::RealOnly, "yield+sensor+mo", 0.1692, 0.1259),
            (Variant::Gbdt, DataMode::SynReal, "yield", 0.1418, 0.1105),
            (Variant::Gbdt, DataMode::SynReal, "yield+mo", 0.1435, 0.1097),
            (Variant::Gbdt, DataMode::SynReal, "yield+sensor", 0.1218, 0.0952),
            (Variant::Gbdt, DataMode::SynReal, "yield+sensor+mo", 0.1352, 0.1064),
            (Variant::Xgb, DataMode::RealOnly, "yield", 0.1571, 0.1137),
            (Variant::Xgb, DataMode::RealOnly, "yield+mo", 0.1869, 0.1360),
            (Variant::Xgb, DataMode::RealOnly, "yield+sensor", 0.1934, 0.1397),
            (Variant::Xgb, DataMode::RealOnly, "yield+sensor+mo", 0.1691, 0.1190),
            (Variant::Xgb, DataMode::SynReal, "yield", 0.1314, 0.1016),
            (Variant::Xgb, DataMode::SynReal, "yield+mo", 0.1468, 0.1141),
            (Variant::Xgb, DataMode::SynReal, "yield+sensor", 0.1288, 0.0996),
            (Variant::Xgb, DataMode::SynReal, "yield+sensor+mo", 0.1340, 0.1017),
        ];
        let mut report = EvalReport::default();
        for &(model, mode, subject, r, m) in cells {
            report.push(EvalRow::new(model, "", subject, mode, r, m, 50));
        }
        report
    }

    #[test]
    fn yield_only_baseline_reproduces_annotations() {
        let mut report = yield_table_fixture();
        report.annotate_improvements(BaselinePolicy::YieldOnlyBaseline).unwrap();
        report.validate().unwrap();
        let get = |model, subject: &str| {
            report
                .find(model, "", subject, DataMode::SynReal)
                .unwrap()
                .clone()
        };
        let rf = get(Variant::Rf, "yield+sensor");
        assert!((rf.rmse_improvement.unwrap().pct - 13.93).abs() < 0.01);
        let gb = get(Variant::Gbdt, "yield+sensor");
        assert!((gb.rmse_improvement.unwrap().pct - 19.55).abs() < 0.01);
        assert!((gb.mae_improvement.unwrap().pct - 7.75).abs() < 0.01);
        let xg = get(Variant::Xgb, "yield+sensor");
        assert!((xg.rmse_improvement.unwrap().pct - 18.01).abs() < 0.01);
        assert!((xg.mae_improvement.unwrap().pct - 12.40).abs() < 0.01);
    }

    #[test]
    fn same_feature_baseline_reproduces_text_percentages() {
        let mut report = yield_table_fixture();
        report.annotate_improvements(BaselinePolicy::SameFeatureBaseline).unwrap();
        let get = |model| {
            report
                .find(model, "", "yield+sensor", DataMode::SynReal)
                .unwrap()
                .rmse_improvement
                .clone()
                .unwrap()
                .pct
        };
        assert!((get(Variant::Rf) - 24.5).abs() < 0.1);
        assert!((get(Variant::Gbdt) - 41.9).abs() < 0.1);
        assert!((get(Variant::Xgb) - 33.4).abs() < 0.1);
    }

    #[test]
    fn csv_export_round_trips_shape() {
        let mut report = yield_table_fixture();
        report.annotate_improvements(BaselinePolicy::YieldOnlyBaseline).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        report.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 25); // header + 24 cells
        assert!(text.lines().nth(1).unwrap().starts_with("RF,,yield,real"));
    }
}
