//! Pearson correlation, correlation-strength categories, and
//! correlation-driven feature selection.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::TimeSeriesFrame;

/// Pearson coefficient over pairs where both members are present,
/// clamped to [-1, 1] against rounding.
pub fn pearson(x: &[Option<f64>], y: &[Option<f64>]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let pairs: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::TooFewPairs {
            needed: 2,
            got: pairs.len(),
        });
    }
    let n = pairs.len() as f64;
    let mean_x = pairs.iter().map(|(a, _)| a).sum::<f64>() / n;
    let mean_y = pairs.iter().map(|(_, b)| b).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in &pairs {
        let dx = a - mean_x;
        let dy = b - mean_y;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok((cov / (var_x * var_y).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation strength bands over |p|, inclusive upper bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Negligible,
    Weak,
    Moderate,
    Strong,
    VeryStrong,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Negligible => "negligible",
            Category::Weak => "weak",
            Category::Moderate => "moderate",
            Category::Strong => "strong",
            Category::VeryStrong => "very-strong",
        };
        f.write_str(s)
    }
}

/// Classify |p|: (0, 0.10] negligible, (0.10, 0.39] weak, (0.39, 0.69]
/// moderate, (0.69, 0.89] strong, (0.89, 1] very strong. Exactly 0 is
/// treated as negligible so the classifier is total.
pub fn classify_correlation(p: f64) -> Result<Category> {
    let a = p.abs();
    if a > 1.0 {
        return Err(Error::CoefficientOutOfRange(p));
    }
    Ok(if a <= 0.10 {
        Category::Negligible
    } else if a <= 0.39 {
        Category::Weak
    } else if a <= 0.69 {
        Category::Moderate
    } else if a <= 0.89 {
        Category::Strong
    } else {
        Category::VeryStrong
    })
}

/// Symmetric pairwise-complete correlation matrix. Constant channels get
/// undefined (None) rows rather than an error.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub channels: Vec<String>,
    /// coefficients[i][j], None where undefined (constant channel or
    /// fewer than 2 complete pairs).
    pub coefficients: Vec<Vec<Option<f64>>>,
    /// Complete-pair counts per cell.
    pub sample_counts: Vec<Vec<usize>>,
}

pub fn correlation_matrix(frame: &TimeSeriesFrame, channels: &[String]) -> Result<CorrelationMatrix> {
    if channels.len() < 2 {
        return Err(Error::InvalidDataset(
            "correlation matrix needs at least 2 channels".into(),
        ));
    }
    let columns: Vec<&[Option<f64>]> = channels
        .iter()
        .map(|c| frame.values(c))
        .collect::<Result<_>>()?;
    let k = channels.len();
    let mut coefficients = vec![vec![None; k]; k];
    let mut sample_counts = vec![vec![0usize; k]; k];
    for i in 0..k {
        for j in i..k {
            let n = columns[i]
                .iter()
                .zip(columns[j])
                .filter(|(a, b)| a.is_some() && b.is_some())
                .count();
            sample_counts[i][j] = n;
            sample_counts[j][i] = n;
            let p = if i == j {
                // Unit diagonal unless the channel is constant.
                match pearson(columns[i], columns[i]) {
                    Ok(_) => Some(1.0),
                    Err(_) => None,
                }
            } else {
                pearson(columns[i], columns[j]).ok()
            };
            coefficients[i][j] = p;
            coefficients[j][i] = p;
        }
    }
    Ok(CorrelationMatrix {
        channels: channels.to_vec(),
        coefficients,
        sample_counts,
    })
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.channels.iter().position(|c| c == a)?;
        let j = self.channels.iter().position(|c| c == b)?;
        self.coefficients[i][j]
    }

    /// Square CSV with acronym header row and column.
    pub fn write_square_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![String::new()];
        header.extend(self.channels.clone());
        w.write_record(&header)?;
        for (i, name) in self.channels.iter().enumerate() {
            let mut record = vec![name.clone()];
            for j in 0..self.channels.len() {
                record.push(match self.coefficients[i][j] {
                    Some(p) => format!("{p}"),
                    None => String::new(),
                });
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long-form CSV (a, b, p, n, category) for plotting.
    pub fn write_long_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["a", "b", "p", "n", "category"])?;
        for i in 0..self.channels.len() {
            for j in 0..self.channels.len() {
                let (p, cat) = match self.coefficients[i][j] {
                    Some(p) => (format!("{p}"), classify_correlation(p)?.to_string()),
                    None => (String::new(), "undefined".to_string()),
                };
                w.write_record([
                    self.channels[i].clone(),
                    self.channels[j].clone(),
                    p,
                    self.sample_counts[i][j].to_string(),
                    cat,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Channels whose correlation with `target` reaches at least `minimum`,
/// ordered by descending |p|, ties broken by channel order.
pub fn select_by_target_correlation(
    matrix: &CorrelationMatrix,
    target: &str,
    minimum: Category,
) -> Result<Vec<String>> {
    let t = matrix
        .channels
        .iter()
        .position(|c| c == target)
        .ok_or_else(|| Error::ChannelNotFound(target.into()))?;
    let mut selected: Vec<(usize, f64)> = Vec::new();
    for (i, _) in matrix.channels.iter().enumerate() {
        if i == t {
            continue;
        }
        if let Some(p) = matrix.coefficients[t][i] {
            if classify_correlation(p)? >= minimum {
                selected.push((i, p.abs()));
            }
        }
    }
    // Stable sort keeps channel order for equal |p|.
    selected.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    Ok(selected
        .into_iter()
        .map(|(i, _)| matrix.channels[i].clone())
        .collect())
}
