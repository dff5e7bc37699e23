//! From-scratch regression learners: a single CART, bagged random
//! forests, first-order gradient boosting, and a second-order regularized
//! booster. All four are deterministic functions of (data, params, seed);
//! per-tree RNG streams are derived from the master seed so parallel
//! training cannot perturb results, and tree outputs are always summed in
//! tree-index order.

mod tree;

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use tree::{FeatureSubsample, Node, Tree, TreeParams};
pub(crate) use tree::{grow_tree, SecondOrder, VarianceReduction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cart,
    Rf,
    Gbdt,
    Xgb,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Cart => "CART",
            Variant::Rf => "RF",
            Variant::Gbdt => "GBDT",
            Variant::Xgb => "XGB",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub bootstrap: bool,
    /// None means the conventional max(1, floor(d/3)) per split.
    pub feature_subsample: Option<FeatureSubsample>,
    pub tree: TreeParams,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 300,
            bootstrap: true,
            feature_subsample: None,
            tree: TreeParams::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostParams {
    pub n_rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// L2 leaf regularization (second-order variant only).
    pub l2_lambda: f64,
    /// Minimum split gain gamma (second-order variant only).
    pub min_split_gain: f64,
    /// Rounds without validation improvement before stopping; None
    /// disables early stopping (the default).
    pub early_stopping_patience: Option<usize>,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            n_rounds: 500,
            learning_rate: 0.05,
            max_depth: 3,
            min_samples_leaf: 5,
            l2_lambda: 1.0,
            min_split_gain: 0.0,
            early_stopping_patience: None,
            validation_fraction: 0.1,
            seed: 0,
        }
    }
}

impl BoostParams {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "learning_rate {} outside (0, 1]",
                self.learning_rate
            )));
        }
        if self.l2_lambda < 0.0 || self.min_split_gain < 0.0 {
            return Err(Error::InvalidParams(
                "l2_lambda and min_split_gain must be >= 0".into(),
            ));
        }
        if self.n_rounds == 0 && self.early_stopping_patience.is_some() {
            return Err(Error::InvalidParams(
                "early stopping needs at least one round".into(),
            ));
        }
        Ok(())
    }

    fn tree_params(&self, second_order: bool) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_samples_leaf: self.min_samples_leaf,
            // Gamma is applied inside the second-order gain itself.
            min_split_gain: if second_order { 0.0 } else { 0.0 },
            feature_subsample: FeatureSubsample::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelParams {
    Tree(TreeParams),
    Forest(ForestParams),
    Boost(BoostParams),
}

/// A trained regressor: variant, fitted trees, base prediction, feature
/// schema, params, and seed. Prediction is a pure function of the input
/// row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub variant: Variant,
    pub feature_names: Vec<String>,
    pub trees: Vec<Tree>,
    /// Mean training target for boosters; unused (0) otherwise.
    pub base_prediction: f64,
    /// Shrinkage applied to each tree's output; 1 for CART and RF.
    pub learning_rate: f64,
    pub params: ModelParams,
    pub seed: u64,
}

impl EnsembleModel {
    /// Deterministic prediction: RF averages trees in index order;
    /// boosters add base + eta * sum of tree outputs in index order.
    pub fn predict(&self, rows: &[Vec<f64>], feature_names: &[String]) -> Result<Vec<f64>> {
        if feature_names != self.feature_names.as_slice() {
            return Err(Error::SchemaMismatch {
                expected: self.feature_names.clone(),
                got: feature_names.to_vec(),
            });
        }
        Ok(rows.iter().map(|r| self.predict_row(r)).collect())
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match self.variant {
            Variant::Cart => self.trees[0].predict_row(row),
            Variant::Rf => {
                let sum: f64 = self.trees.iter().map(|t| t.predict_row(row)).sum();
                sum / self.trees.len() as f64
            }
            Variant::Gbdt | Variant::Xgb => {
                let sum: f64 = self.trees.iter().map(|t| t.predict_row(row)).sum();
                self.base_prediction + self.learning_rate * sum
            }
        }
    }

    /// Self-describing structured text serialization; loading reproduces
    /// bit-identical predictions.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EnsembleModel> {
        let text = std::fs::read_to_string(path)?;
        let model: EnsembleModel = serde_json::from_str(&text)
            .map_err(|e| Error::ModelFormat(format!("{}: {e}", path.display())))?;
        if model.trees.is_empty() && !matches!(model.variant, Variant::Gbdt | Variant::Xgb) {
            return Err(Error::ModelFormat("model has no trees".into()));
        }
        Ok(model)
    }
}

fn check_fit_inputs(rows: &[Vec<f64>], targets: &[f64], min_samples_leaf: usize) -> Result<()> {
    if rows.len() != targets.len() {
        return Err(Error::LengthMismatch(rows.len(), targets.len()));
    }
    if rows.len() < 2 * min_samples_leaf.max(1) {
        return Err(Error::TooFewRows {
            got: rows.len(),
            need: 2 * min_samples_leaf.max(1),
        });
    }
    Ok(())
}

/// Independent per-tree RNG stream from (seed, tree index).
fn tree_rng(seed: u64, index: u64) -> ChaCha8Rng {
    // splitmix64 finalizer over the combined value.
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Greedy exact CART minimizing squared error.
pub fn fit_cart(
    rows: &[Vec<f64>],
    targets: &[f64],
    feature_names: &[String],
    params: &TreeParams,
    seed: u64,
) -> Result<EnsembleModel> {
    params.validate()?;
    check_fit_inputs(rows, targets, params.min_samples_leaf)?;
    let mut rng = tree_rng(seed, 0);
    let tree = grow_tree(
        rows,
        targets,
        params,
        VarianceReduction {
            min_split_gain: params.min_split_gain,
        },
        &mut rng,
    );
    Ok(EnsembleModel {
        variant: Variant::Cart,
        feature_names: feature_names.to_vec(),
        trees: vec![tree],
        base_prediction: 0.0,
        learning_rate: 1.0,
        params: ModelParams::Tree(params.clone()),
        seed,
    })
}

/// Bagged forest: each tree sees a bootstrap resample (when enabled) and
/// subsampled features per split; prediction is the mean over trees.
pub fn fit_random_forest(
    rows: &[Vec<f64>],
    targets: &[f64],
    feature_names: &[String],
    params: &ForestParams,
) -> Result<EnsembleModel> {
    params.tree.validate()?;
    if params.n_trees < 1 {
        return Err(Error::InvalidParams("n_trees must be >= 1".into()));
    }
    check_fit_inputs(rows, targets, params.tree.min_samples_leaf)?;
    let n = targets.len();
    let d = rows[0].len();
    let subsample = params
        .feature_subsample
        .unwrap_or(FeatureSubsample::Count((d / 3).max(1)));
    let tree_params = TreeParams {
        feature_subsample: subsample,
        ..params.tree.clone()
    };

    let trees: Vec<Tree> = (0..params.n_trees as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = tree_rng(params.seed, i);
            let (x, y): (Vec<Vec<f64>>, Vec<f64>) = if params.bootstrap {
                let dist = Uniform::from(0..n);
                let picks: Vec<usize> = (0..n).map(|_| dist.sample(&mut rng)).collect();
                (
                    picks.iter().map(|&r| rows[r].clone()).collect(),
                    picks.iter().map(|&r| targets[r]).collect(),
                )
            } else {
                (rows.to_vec(), targets.to_vec())
            };
            grow_tree(
                &x,
                &y,
                &tree_params,
                VarianceReduction {
                    min_split_gain: tree_params.min_split_gain,
                },
                &mut rng,
            )
        })
        .collect();

    Ok(EnsembleModel {
        variant: Variant::Rf,
        feature_names: feature_names.to_vec(),
        trees,
        base_prediction: 0.0,
        learning_rate: 1.0,
        params: ModelParams::Forest(params.clone()),
        seed: params.seed,
    })
}

fn boost(
    rows: &[Vec<f64>],
    targets: &[f64],
    feature_names: &[String],
    params: &BoostParams,
    variant: Variant,
) -> Result<EnsembleModel> {
    params.validate()?;
    check_fit_inputs(rows, targets, params.min_samples_leaf)?;
    let second_order = variant == Variant::Xgb;
    let tree_params = params.tree_params(second_order);

    // Optional validation carve-out for early stopping.
    let (fit_idx, val_idx): (Vec<usize>, Vec<usize>) = match params.early_stopping_patience {
        Some(_) => {
            let mut idx: Vec<usize> = (0..targets.len()).collect();
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            idx.shuffle(&mut rng);
            let val_n = ((targets.len() as f64 * params.validation_fraction).floor() as usize)
                .clamp(1, targets.len() - 1);
            let (val, fit) = idx.split_at(val_n);
            (fit.to_vec(), val.to_vec())
        }
        None => ((0..targets.len()).collect(), Vec::new()),
    };
    let fit_rows: Vec<Vec<f64>> = fit_idx.iter().map(|&i| rows[i].clone()).collect();
    let fit_targets: Vec<f64> = fit_idx.iter().map(|&i| targets[i]).collect();

    let base = fit_targets.iter().sum::<f64>() / fit_targets.len() as f64;
    let mut pred: Vec<f64> = vec![base; fit_targets.len()];
    let mut val_pred: Vec<f64> = vec![base; val_idx.len()];
    let mut trees: Vec<Tree> = Vec::with_capacity(params.n_rounds);

    let mut best_val = f64::INFINITY;
    let mut best_len = 0usize;
    let mut since_best = 0usize;

    for round in 0..params.n_rounds as u64 {
        let mut rng = tree_rng(params.seed, round);
        let tree = if second_order {
            // Gradient of 0.5*(pred - y)^2 is (pred - y); hessian 1.
            let grads: Vec<f64> = pred
                .iter()
                .zip(&fit_targets)
                .map(|(p, y)| p - y)
                .collect();
            grow_tree(
                &fit_rows,
                &grads,
                &tree_params,
                SecondOrder {
                    lambda: params.l2_lambda,
                    gamma: params.min_split_gain,
                },
                &mut rng,
            )
        } else {
            let residuals: Vec<f64> = fit_targets
                .iter()
                .zip(&pred)
                .map(|(y, p)| y - p)
                .collect();
            grow_tree(
                &fit_rows,
                &residuals,
                &tree_params,
                VarianceReduction { min_split_gain: 0.0 },
                &mut rng,
            )
        };
        for (p, row) in pred.iter_mut().zip(&fit_rows) {
            *p += params.learning_rate * tree.predict_row(row);
        }
        trees.push(tree);

        if let Some(patience) = params.early_stopping_patience {
            let tree = trees.last().unwrap();
            let mut sse = 0.0;
            for (vp, &vi) in val_pred.iter_mut().zip(&val_idx) {
                *vp += params.learning_rate * tree.predict_row(&rows[vi]);
                let e = *vp - targets[vi];
                sse += e * e;
            }
            if sse < best_val {
                best_val = sse;
                best_len = trees.len();
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    trees.truncate(best_len);
                    break;
                }
            }
        }
    }

    Ok(EnsembleModel {
        variant,
        feature_names: feature_names.to_vec(),
        trees,
        base_prediction: base,
        learning_rate: params.learning_rate,
        params: ModelParams::Boost(params.clone()),
        seed: params.seed,
    })
}

/// First-order gradient boosting: each round fits a depth-limited CART
/// to the current residuals and adds eta times its prediction.
pub fn fit_gbdt(
    rows: &[Vec<f64>],
    targets: &[f64],
    feature_names: &[String],
    params: &BoostParams,
) -> Result<EnsembleModel> {
    boost(rows, targets, feature_names, params, Variant::Gbdt)
}

/// Second-order booster with L2-regularized leaf weights and gamma-pruned
/// splits.
pub fn fit_xgb(
    rows: &[Vec<f64>],
    targets: &[f64],
    feature_names: &[String],
    params: &BoostParams,
) -> Result<EnsembleModel> {
    boost(rows, targets, feature_names, params, Variant::Xgb)
}
