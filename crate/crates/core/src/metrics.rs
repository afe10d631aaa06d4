//! Accuracy and group-fairness metrics for binary labels and two groups.
//!
//! Group 0 is unprivileged and prediction 1 is the favorable outcome, so a
//! demographic parity below 1 and a negative equalized-odds gap both indicate
//! disadvantage for group 0.

use std::fmt;

use crate::error::{Error, Result};

/// A metric value, or the reason it is undefined on this data.
#[derive(Debug, Clone, PartialEq)]
pub enum Measure {
    Value(f64),
    Undefined(String),
}

impl Measure {
    pub fn value(&self) -> Option<f64> {
        match self {
            Measure::Value(v) => Some(*v),
            Measure::Undefined(_) => None,
        }
    }

    pub fn is_defined(&self) -> bool {
        matches!(self, Measure::Value(_))
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Measure::Value(v) => write!(f, "{v:.4}"),
            Measure::Undefined(why) => write!(f, "undefined ({why})"),
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape { expected: a, actual: b });
    }
    if a == 0 {
        return Err(Error::Input("empty input".into()));
    }
    Ok(())
}

fn check_binary(v: &[usize], what: &str) -> Result<()> {
    if v.iter().any(|&x| x > 1) {
        return Err(Error::Input(format!("{what} must be 0 or 1")));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `P(yhat = 1 | a = 0) / P(yhat = 1 | a = 1)`.
pub fn demographic_parity(preds: &[usize], groups: &[usize]) -> Result<Measure> {
    check_lengths(preds.len(), groups.len())?;
    check_binary(preds, "predictions")?;
    check_binary(groups, "groups")?;
    let mut n = [0usize; 2];
    let mut pos = [0usize; 2];
    for (&p, &g) in preds.iter().zip(groups) {
        n[g] += 1;
        pos[g] += p;
    }
    if let Some(g) = (0..2).find(|&g| n[g] == 0) {
        return Err(Error::Input(format!("group {g} is empty")));
    }
    if pos[1] == 0 {
        return Ok(Measure::Undefined("dp: no favorable predictions in group 1".into()));
    }
    let rate = |g: usize| pos[g] as f64 / n[g] as f64;
    Ok(Measure::Value(rate(0) / rate(1)))
}

/// `(TPR_0 - TPR_1) + (FPR_0 - FPR_1)`.
pub fn equalized_odds(preds: &[usize], labels: &[usize], groups: &[usize]) -> Result<Measure> {
    check_lengths(preds.len(), labels.len())?;
    check_lengths(preds.len(), groups.len())?;
    check_binary(preds, "predictions")?;
    check_binary(labels, "labels")?;
    check_binary(groups, "groups")?;
    // cell[g][y] = (count, favorable predictions)
    let mut cell = [[(0usize, 0usize); 2]; 2];
    for ((&p, &y), &g) in preds.iter().zip(labels).zip(groups) {
        cell[g][y].0 += 1;
        cell[g][y].1 += p;
    }
    for g in 0..2 {
        for y in 0..2 {
            if cell[g][y].0 == 0 {
                return Ok(Measure::Undefined(format!("delta_eo: empty cell (a={g}, y={y})")));
            }
        }
    }
    let rate = |g: usize, y: usize| cell[g][y].1 as f64 / cell[g][y].0 as f64;
    Ok(Measure::Value((rate(0, 1) - rate(1, 1)) + (rate(0, 0) - rate(1, 0))))
}

/// Mean predicted probability of the desired class per (group, label) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceGap {
    /// `mean[g][y]`, `None` for empty cells.
    pub mean: [[Option<f64>; 2]; 2],
    pub counts: [[usize; 2]; 2],
    /// Privileged minus unprivileged mean, among desired-label samples.
    pub gap_desired: Measure,
    /// Unprivileged minus privileged mean probability of the less-desired
    /// label, among undesired-label samples.
    pub gap_undesired: Measure,
}

pub fn confidence_gap(p_desired: &[f64], labels: &[usize], groups: &[usize]) -> Result<ConfidenceGap> {
    check_lengths(p_desired.len(), labels.len())?;
    check_lengths(p_desired.len(), groups.len())?;
    check_binary(labels, "labels")?;
    check_binary(groups, "groups")?;
    if p_desired.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Input("probabilities must lie in [0, 1]".into()));
    }
    let mut sum = [[0.0; 2]; 2];
    let mut counts = [[0usize; 2]; 2];
    for ((&p, &y), &g) in p_desired.iter().zip(labels).zip(groups) {
        sum[g][y] += p;
        counts[g][y] += 1;
    }
    let mut mean = [[None; 2]; 2];
    for g in 0..2 {
        for y in 0..2 {
            if counts[g][y] > 0 {
                mean[g][y] = Some(sum[g][y] / counts[g][y] as f64);
            }
        }
    }
    let gap_desired = match (mean[1][1], mean[0][1]) {
        (Some(p), Some(u)) => Measure::Value(p - u),
        _ => Measure::Undefined("gap1: empty desired-label cell".into()),
    };
    let gap_undesired = match (mean[0][0], mean[1][0]) {
        (Some(u), Some(p)) => Measure::Value((1.0 - u) - (1.0 - p)),
        _ => Measure::Undefined("gap2: empty undesired-label cell".into()),
    };
    Ok(ConfidenceGap {
        mean,
        counts,
        gap_desired,
        gap_undesired,
    })
}

/// Everything reported for one evaluated model on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub accuracy: f64,
    pub dp: Measure,
    pub delta_eo: Measure,
    pub confidence: ConfidenceGap,
}

impl MetricsRecord {
    /// Builds the record from per-sample class probabilities; hard predictions
    /// are the argmax (ties to the lower class).
    pub fn from_probabilities(probs: &[Vec<f64>], labels: &[usize], groups: &[usize], desired: usize) -> Result<Self> {
        check_lengths(probs.len(), labels.len())?;
        let preds: Vec<usize> = probs
            .iter()
            .map(|p| usize::from(crate::nn::argmax(p) == desired))
            .collect();
        let binary_labels: Vec<usize> = labels.iter().map(|&y| usize::from(y == desired)).collect();
        let p_desired: Vec<f64> = probs.iter().map(|p| p[desired].clamp(0.0, 1.0)).collect();
        Ok(Self {
            accuracy: accuracy(&preds, &binary_labels)?,
            dp: demographic_parity(&preds, groups)?,
            delta_eo: equalized_odds(&preds, &binary_labels, groups)?,
            confidence: confidence_gap(&p_desired, &binary_labels, groups)?,
        })
    }

    /// Names of the undefined metrics, `;`-separated.
    pub fn undefined_flags(&self) -> String {
        [
            ("dp", &self.dp),
            ("delta_eo", &self.delta_eo),
            ("gap1", &self.confidence.gap_desired),
            ("gap2", &self.confidence.gap_undesired),
        ]
        .iter()
        .filter(|(_, m)| !m.is_defined())
        .map(|(n, _)| *n)
        .collect::<Vec<_>>()
        .join(";")
    }
}
