//! Binary regression trees grown by exact greedy split search.
//!
//! Candidate thresholds are midpoints between consecutive distinct
//! sorted feature values, so split decisions are deterministic and an
//! exhaustive oracle can re-derive them. Ties are broken by lowest
//! feature index, then lowest threshold.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weak-learner settings shared by every ensemble variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub min_split_gain: f64,
    pub feature_subsample: FeatureSubsample,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 6,
            min_samples_leaf: 5,
            min_split_gain: 0.0,
            feature_subsample: FeatureSubsample::All,
        }
    }
}

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(Error::InvalidParams("max_depth must be >= 1".into()));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::InvalidParams("min_samples_leaf must be >= 1".into()));
        }
        if let FeatureSubsample::Fraction(f) = self.feature_subsample {
            if !(0.0..=1.0).contains(&f) || f == 0.0 {
                return Err(Error::InvalidParams(format!(
                    "feature fraction {f} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// How many candidate features each split considers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSubsample {
    All,
    Count(usize),
    Fraction(f64),
}

impl FeatureSubsample {
    pub fn resolve(self, n_features: usize) -> usize {
        let k = match self {
            FeatureSubsample::All => n_features,
            FeatureSubsample::Count(c) => c,
            FeatureSubsample::Fraction(f) => (n_features as f64 * f).floor() as usize,
        };
        k.clamp(1, n_features)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Flat-array tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut idx = 0usize;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    idx = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self.nodes.first() {
            Some(Node::Split { feature, threshold, .. }) => Some((*feature, *threshold)),
            _ => None,
        }
    }

    /// Every internal node threshold, for structural checks.
    pub fn splits(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, threshold, .. } => Some((*feature, *threshold)),
            Node::Leaf { .. } => None,
        })
    }
}

/// Split objective. Per-row statistics are a pair (s1, s2): for variance
/// reduction these are (y, y^2); for the second-order objective they are
/// (gradient, hessian).
pub(crate) trait Criterion {
    fn contrib(&self, v: f64) -> (f64, f64);
    fn leaf_value(&self, n: usize, s1: f64, s2: f64) -> f64;
    fn gain(&self, parent: (usize, f64, f64), left: (usize, f64, f64), right: (usize, f64, f64)) -> f64;
    /// A split is taken only when its gain strictly exceeds this.
    fn min_gain(&self) -> f64;
}

/// Squared-error variance reduction; leaves predict the mean target.
pub(crate) struct VarianceReduction {
    pub min_split_gain: f64,
}

impl Criterion for VarianceReduction {
    fn contrib(&self, v: f64) -> (f64, f64) {
        (v, v * v)
    }

    fn leaf_value(&self, n: usize, s1: f64, _s2: f64) -> f64 {
        s1 / n as f64
    }

    fn gain(&self, parent: (usize, f64, f64), left: (usize, f64, f64), right: (usize, f64, f64)) -> f64 {
        // SSE reduction written without the quadratic sums (they cancel):
        // sum_L^2/n_L + sum_R^2/n_R - sum^2/n. This is also exactly twice
        // the unregularized second-order gain, term for term, so split
        // choices agree bit-for-bit with that objective at lambda=0.
        let score = |(n, s1, _): (usize, f64, f64)| s1 * s1 / n as f64;
        score(left) + score(right) - score(parent)
    }

    fn min_gain(&self) -> f64 {
        self.min_split_gain
    }
}

/// Second-order regularized objective: leaf weight -G/(H+lambda), split
/// gain 0.5[G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)] - gamma.
pub(crate) struct SecondOrder {
    pub lambda: f64,
    pub gamma: f64,
}

impl Criterion for SecondOrder {
    fn contrib(&self, g: f64) -> (f64, f64) {
        // Hessian is 1 per row for squared loss.
        (g, 1.0)
    }

    fn leaf_value(&self, _n: usize, g: f64, h: f64) -> f64 {
        -g / (h + self.lambda)
    }

    fn gain(&self, parent: (usize, f64, f64), left: (usize, f64, f64), right: (usize, f64, f64)) -> f64 {
        let score = |(_, g, h): (usize, f64, f64)| g * g / (h + self.lambda);
        0.5 * (score(left) + score(right) - score(parent)) - self.gamma
    }

    fn min_gain(&self) -> f64 {
        0.0
    }
}

struct Grower<'a, C: Criterion> {
    rows: &'a [Vec<f64>],
    values: &'a [f64],
    params: &'a TreeParams,
    criterion: C,
    nodes: Vec<Node>,
}

/// Grow a tree on `rows` (the full feature matrix) fitting per-row
/// `values` (targets, residuals, or gradients depending on the caller).
/// The RNG is consulted only when feature subsampling is active.
pub(crate) fn grow_tree<C: Criterion>(
    rows: &[Vec<f64>],
    values: &[f64],
    params: &TreeParams,
    criterion: C,
    rng: &mut ChaCha8Rng,
) -> Tree {
    let mut grower = Grower {
        rows,
        values,
        params,
        criterion,
        nodes: Vec::new(),
    };
    let all: Vec<usize> = (0..values.len()).collect();
    grower.grow(all, 0, rng);
    Tree {
        nodes: grower.nodes,
    }
}

impl<C: Criterion> Grower<'_, C> {
    fn stats(&self, members: &[usize]) -> (usize, f64, f64) {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for &i in members {
            let (a, b) = self.criterion.contrib(self.values[i]);
            s1 += a;
            s2 += b;
        }
        (members.len(), s1, s2)
    }

    fn grow(&mut self, members: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let parent = self.stats(&members);
        let idx = self.nodes.len();
        if depth >= self.params.max_depth || members.len() < 2 * self.params.min_samples_leaf {
            self.nodes.push(Node::Leaf {
                value: self.criterion.leaf_value(parent.0, parent.1, parent.2),
            });
            return idx;
        }
        let Some((feature, threshold)) = self.best_split(&members, parent, rng) else {
            self.nodes.push(Node::Leaf {
                value: self.criterion.leaf_value(parent.0, parent.1, parent.2),
            });
            return idx;
        };
        // Placeholder; children are appended after recursion.
        self.nodes.push(Node::Leaf { value: 0.0 });
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = members
            .into_iter()
            .partition(|&i| self.rows[i][feature] <= threshold);
        let left = self.grow(left_rows, depth + 1, rng);
        let right = self.grow(right_rows, depth + 1, rng);
        self.nodes[idx] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        idx
    }

    fn best_split(
        &self,
        members: &[usize],
        parent: (usize, f64, f64),
        rng: &mut ChaCha8Rng,
    ) -> Option<(usize, f64)> {
        let n_features = self.rows[0].len();
        let k = self.params.feature_subsample.resolve(n_features);
        let candidates: Vec<usize> = if k >= n_features {
            (0..n_features).collect()
        } else {
            // Ascending order keeps the tie-break rule independent of
            // the sampling order.
            let mut picked = rand::seq::index::sample(rng, n_features, k).into_vec();
            picked.sort_unstable();
            picked
        };

        let min_leaf = self.params.min_samples_leaf;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted: Vec<(f64, f64)> = Vec::with_capacity(members.len());
        for &feature in &candidates {
            sorted.clear();
            sorted.extend(members.iter().map(|&i| (self.rows[i][feature], self.values[i])));
            sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut left = (0usize, 0.0f64, 0.0f64);
            for i in 0..sorted.len() - 1 {
                let (x, v) = sorted[i];
                let (a, b) = self.criterion.contrib(v);
                left = (left.0 + 1, left.1 + a, left.2 + b);
                if sorted[i + 1].0 <= x {
                    continue;
                }
                if left.0 < min_leaf || sorted.len() - left.0 < min_leaf {
                    continue;
                }
                let right = (parent.0 - left.0, parent.1 - left.1, parent.2 - left.2);
                let gain = self.criterion.gain(parent, left, right);
                if gain <= self.criterion.min_gain() {
                    continue;
                }
                // Strictly-greater keeps the first (lowest feature,
                // lowest threshold) candidate on ties.
                let threshold = x + (sorted[i + 1].0 - x) / 2.0;
                if best.map_or(true, |(bg, _, _)| gain > bg) {
                    best = Some((gain, feature, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn depth_one_step_split() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let y = vec![0.0, 0.0, 1.0, 1.0];
        let params = TreeParams {
            max_depth: 1,
            min_samples_leaf: 1,
            ..Default::default()
        };
        let t = grow_tree(&x, &y, &params, VarianceReduction { min_split_gain: 0.0 }, &mut rng());
        assert_eq!(t.root_split(), Some((0, 1.5)));
        assert_eq!(t.predict_row(&[0.5]), 0.0);
        assert_eq!(t.predict_row(&[2.5]), 1.0);
    }

    #[test]
    fn constant_target_single_leaf() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let y = vec![5.0, 5.0, 5.0];
        let params = TreeParams {
            min_samples_leaf: 1,
            ..Default::default()
        };
        let t = grow_tree(&x, &y, &params, VarianceReduction { min_split_gain: 0.0 }, &mut rng());
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.predict_row(&[7.0]), 5.0);
    }

    #[test]
    fn memorizes_distinct_values_with_unbounded_depth() {
        let x: Vec<Vec<f64>> = (0..16).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..16).map(|i| i as f64 * 0.7).collect();
        let params = TreeParams {
            max_depth: 32,
            min_samples_leaf: 1,
            ..Default::default()
        };
        let t = grow_tree(&x, &y, &params, VarianceReduction { min_split_gain: 0.0 }, &mut rng());
        for (row, target) in x.iter().zip(&y) {
            assert_eq!(t.predict_row(row), *target);
        }
    }

    #[test]
    fn thresholds_lie_strictly_between_observed_values() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64 * 0.37).sin(), (i % 5) as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| (i as f64 * 1.3).cos()).collect();
        let params = TreeParams {
            max_depth: 6,
            min_samples_leaf: 1,
            ..Default::default()
        };
        let t = grow_tree(&x, &y, &params, VarianceReduction { min_split_gain: 0.0 }, &mut rng());
        for (feature, threshold) in t.splits() {
            let mut below = f64::NEG_INFINITY;
            let mut above = f64::INFINITY;
            for row in &x {
                let v = row[feature];
                if v <= threshold && v > below {
                    below = v;
                }
                if v > threshold && v < above {
                    above = v;
                }
            }
            assert!(below < threshold && threshold < above);
        }
    }

    #[test]
    fn second_order_large_lambda_shrinks_leaves() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let g = vec![-1.0, -2.0, 1.0, 2.0];
        let params = TreeParams {
            max_depth: 3,
            min_samples_leaf: 1,
            ..Default::default()
        };
        let t = grow_tree(
            &x,
            &g,
            &params,
            SecondOrder { lambda: 1e12, gamma: 0.0 },
            &mut rng(),
        );
        for row in &x {
            assert!(t.predict_row(row).abs() < 1e-9);
        }
    }

    #[test]
    fn second_order_gamma_blocks_weak_splits() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let g = vec![-1.0, -1.0, 1.0, 1.0];
        let params = TreeParams {
            max_depth: 3,
            min_samples_leaf: 1,
            ..Default::default()
        };
        // Root gain at lambda=0: 0.5*(4/2 + 4/2 - 0) = 2.
        let kept = grow_tree(&x, &g, &params, SecondOrder { lambda: 0.0, gamma: 1.9 }, &mut rng());
        assert!(kept.root_split().is_some());
        let blocked = grow_tree(&x, &g, &params, SecondOrder { lambda: 0.0, gamma: 2.1 }, &mut rng());
        assert_eq!(blocked.nodes.len(), 1);
    }
}
