//! Accuracy, MAE and the concordance correlation coefficient, all computed
//! in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(op: &'static str, a: usize, b: usize, min: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("length {a} vs {b}")));
    }
    if a < min {
        return Err(Error::Metric(format!("{op} needs at least {min} samples, got {a}")));
    }
    Ok(())
}

/// Fraction of exact label matches.
pub fn accuracy(preds: &[usize], truths: &[usize]) -> Result<f64> {
    check_lengths("accuracy", preds.len(), truths.len(), 1)?;
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn mae(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths("mae", x.len(), y.len(), 1)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn covariance(x: &[f64], y: &[f64], mx: f64, my: f64) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / x.len() as f64
}

/// Pearson correlation with population moments.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths("pearson", x.len(), y.len(), 2)?;
    let (mx, vx) = moments(x);
    let (my, vy) = moments(y);
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Metric("pearson correlation of a constant series".into()));
    }
    Ok(covariance(x, y, mx, my) / (vx * vy).sqrt())
}

/// Concordance correlation coefficient
/// `2 cov(x, y) / (var x + var y + (mean x - mean y)^2)` with population
/// (1/n) moments. A constant series makes the value undefined and is
/// reported as an error.
pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_lengths("ccc", x.len(), y.len(), 2)?;
    let (mx, vx) = moments(x);
    let (my, vy) = moments(y);
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Metric("CCC is undefined for a constant series".into()));
    }
    let cov = covariance(x, y, mx, my);
    Ok((2.0 * cov / (vx + vy + (mx - my).powi(2))).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMetrics {
    pub name: String,
    pub mae: f64,
    pub ccc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum MetricsReport {
    Classify { accuracy: f64, samples: usize },
    Regress { targets: Vec<TargetMetrics>, samples: usize },
}

impl MetricsReport {
    pub fn classification(preds: &[usize], truths: &[usize]) -> Result<Self> {
        Ok(MetricsReport::Classify { accuracy: accuracy(preds, truths)?, samples: preds.len() })
    }

    /// `preds[i]` and `truths[i]` hold one value per named target.
    pub fn regression(names: &[&str], preds: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<Self> {
        check_lengths("regression_report", preds.len(), truths.len(), 2)?;
        let targets = names
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let p: Vec<f64> = preds.iter().map(|r| r[k]).collect();
                let t: Vec<f64> = truths.iter().map(|r| r[k]).collect();
                Ok(TargetMetrics { name: name.to_string(), mae: mae(&p, &t)?, ccc: ccc(&p, &t)? })
            })
            .collect::<Result<_>>()?;
        Ok(MetricsReport::Regress { targets, samples: preds.len() })
    }

    /// Scalar used for model selection: accuracy, or mean CCC over targets.
    pub fn selection_score(&self) -> f64 {
        match self {
            MetricsReport::Classify { accuracy, .. } => *accuracy,
            MetricsReport::Regress { targets, .. } => {
                targets.iter().map(|t| t.ccc).sum::<f64>() / targets.len().max(1) as f64
            }
        }
    }
}
