//! Confusion matrices, macro F1, probability ensembles and reports.
//!
//! Conventions: a ratio with a zero denominator is 0, so a class that never
//! occurs and is never predicted contributes F1 = 0 and still counts in the
//! macro mean over all four classes. Argmax ties go to the lower class
//! index. Values are kept at full precision and rounded to two decimals only
//! when a report is serialized.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::dataset::NUM_CLASSES;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn arg(msg: impl Into<String>) -> EvalError {
    EvalError::Argument(msg.into())
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u64; NUM_CLASSES]; NUM_CLASSES]);

impl ConfusionMatrix {
    pub fn from_predictions(y_true: &[usize], y_pred: &[usize]) -> Result<Self> {
        if y_true.len() != y_pred.len() {
            return Err(arg(format!(
                "{} true labels but {} predictions",
                y_true.len(),
                y_pred.len()
            )));
        }
        if y_true.is_empty() {
            return Err(arg("no predictions to evaluate"));
        }
        let mut m = [[0u64; NUM_CLASSES]; NUM_CLASSES];
        for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
            if t >= NUM_CLASSES || p >= NUM_CLASSES {
                return Err(arg(format!(
                    "class index out of range at position {i}: true {t}, predicted {p}"
                )));
            }
            m[t][p] += 1;
        }
        Ok(Self(m))
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    /// Precision, recall and F1 of every class, as fractions.
    pub fn per_class(&self) -> [ClassMetrics; NUM_CLASSES] {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        std::array::from_fn(|c| {
            let tp = self.0[c][c];
            let predicted: u64 = (0..NUM_CLASSES).map(|t| self.0[t][c]).sum();
            let actual: u64 = self.0[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics { precision, recall, f1 }
        })
    }

    /// Mean of the four per-class F1 values, as a percentage.
    pub fn macro_f1(&self) -> f64 {
        self.per_class().iter().map(|m| m.f1).sum::<f64>() / NUM_CLASSES as f64 * 100.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro F1 of class-index predictions, in percent.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    Ok(ConfusionMatrix::from_predictions(y_true, y_pred)?.macro_f1())
}

/// Index of the largest value; ties resolve to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("standard layout rows")))
        .collect()
}

/// How several probability matrices are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleRule {
    #[default]
    Mean,
    /// Each member votes for its argmax; rows hold vote fractions.
    MajorityVote,
}

const ROW_TOLERANCE: f64 = 1e-4;

fn check_sets(sets: &[Array2<f64>], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let Some(first) = sets.first() else {
        return Err(arg("ensemble needs at least one probability matrix"));
    };
    for (k, s) in sets.iter().enumerate() {
        if s.dim() != first.dim() || s.ncols() != NUM_CLASSES {
            return Err(arg(format!(
                "probability matrix {k} has shape {:?}, expected ({}, {NUM_CLASSES})",
                s.dim(),
                first.nrows()
            )));
        }
        for (i, row) in s.rows().into_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE || row.iter().any(|v| !(*v >= 0.0)) {
                return Err(arg(format!(
                    "row {i} of matrix {k} is not a probability vector (sum {sum})"
                )));
            }
        }
    }
    let weights = match weights {
        None => vec![1.0 / sets.len() as f64; sets.len()],
        Some(w) => {
            if w.len() != sets.len() {
                return Err(arg(format!("{} weights for {} matrices", w.len(), sets.len())));
            }
            let total: f64 = w.iter().sum();
            if w.iter().any(|v| !(*v >= 0.0)) || !(total > 0.0) || !total.is_finite() {
                return Err(arg("ensemble weights must be non-negative with a positive sum"));
            }
            w.iter().map(|v| v / total).collect()
        }
    };
    Ok(weights)
}

/// Row-wise weighted mean of probability matrices (uniform by default).
///
/// Each entry is computed from its member values sorted ascending as
/// `min + Σ wᵢ (xᵢ − min)`, which makes the result independent of the order
/// of `sets` and exactly equal to the input when all members agree.
pub fn ensemble_probs(sets: &[Array2<f64>], weights: Option<&[f64]>) -> Result<Array2<f64>> {
    let weights = check_sets(sets, weights)?;
    let (n, c) = sets[0].dim();
    let mut members: Vec<(f64, f64)> = Vec::with_capacity(sets.len());
    Ok(Array2::from_shape_fn((n, c), |(i, j)| {
        members.clear();
        members.extend(sets.iter().zip(&weights).map(|(s, &w)| (s[[i, j]], w)));
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let base = members[0].0;
        base + members.iter().map(|(x, w)| w * (x - base)).sum::<f64>()
    }))
}

/// Vote fractions: entry `(i, c)` is the (weighted) share of members whose
/// argmax for sample `i` is `c`.
pub fn majority_vote(sets: &[Array2<f64>], weights: Option<&[f64]>) -> Result<Array2<f64>> {
    let weights = check_sets(sets, weights)?;
    let n = sets[0].nrows();
    let mut votes = Array2::<f64>::zeros((n, NUM_CLASSES));
    let mut ordered: Vec<(usize, &Array2<f64>, f64)> = sets
        .iter()
        .zip(&weights)
        .enumerate()
        .map(|(k, (s, &w))| (k, s, w))
        .collect();
    ordered.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)));
    for i in 0..n {
        let mut picks: Vec<(usize, f64)> = ordered
            .iter()
            .map(|(_, s, w)| (argmax(s.row(i).as_slice().expect("standard layout")), *w))
            .collect();
        picks.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        for (c, w) in picks {
            votes[[i, c]] += w;
        }
    }
    Ok(votes)
}

pub fn combine(sets: &[Array2<f64>], weights: Option<&[f64]>, rule: EnsembleRule) -> Result<Array2<f64>> {
    match rule {
        EnsembleRule::Mean => ensemble_probs(sets, weights),
        EnsembleRule::MajorityVote => majority_vote(sets, weights),
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

fn ser_round2<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(round2(*v))
}

/// Per-class values in percent, rounded on output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    #[serde(serialize_with = "ser_round2")]
    pub precision: f64,
    #[serde(serialize_with = "ser_round2")]
    pub recall: f64,
    #[serde(serialize_with = "ser_round2")]
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `train-val`, `fold-k` or `ensemble`.
    pub scenario: String,
    pub model: String,
    pub config_hash: String,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassReport>,
    #[serde(serialize_with = "ser_round2")]
    pub macro_f1: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        crate::volume::write_atomic(path, text.as_bytes()).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_slice(&text)?)
    }
}

/// Builds a report from true labels and probability rows (argmax
/// predictions).
pub fn make_report(
    y_true: &[usize],
    probs: &Array2<f64>,
    scenario: &str,
    model: &str,
    config_hash: &str,
) -> Result<MetricsReport> {
    if probs.nrows() != y_true.len() || probs.ncols() != NUM_CLASSES {
        return Err(arg(format!(
            "{} labels but probability matrix {:?}",
            y_true.len(),
            probs.dim()
        )));
    }
    let confusion = ConfusionMatrix::from_predictions(y_true, &argmax_rows(probs))?;
    let per_class = confusion
        .per_class()
        .iter()
        .map(|m| ClassReport {
            precision: m.precision * 100.0,
            recall: m.recall * 100.0,
            f1: m.f1 * 100.0,
        })
        .collect();
    Ok(MetricsReport {
        scenario: scenario.to_string(),
        model: model.to_string(),
        config_hash: config_hash.to_string(),
        confusion,
        per_class,
        macro_f1: confusion.macro_f1(),
    })
}

/// Pivots reports into one row per model with one macro-F1 column per
/// scenario (in order of first appearance), e.g. `fold-1 … fold-5`.
pub fn comparison_table(reports: &[MetricsReport]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut scenarios: Vec<&str> = Vec::new();
    let mut models: Vec<&str> = Vec::new();
    for r in reports {
        if !scenarios.contains(&r.scenario.as_str()) {
            scenarios.push(&r.scenario);
        }
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    let mut header = vec!["model".to_string()];
    header.extend(scenarios.iter().map(|s| s.to_string()));
    let rows = models
        .iter()
        .map(|m| {
            let mut row = vec![m.to_string()];
            row.extend(scenarios.iter().map(|s| {
                reports
                    .iter()
                    .find(|r| r.model == *m && r.scenario == *s)
                    .map(|r| format!("{:.2}", r.macro_f1))
                    .unwrap_or_default()
            }));
            row
        })
        .collect();
    (header, rows)
}

pub fn write_comparison_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    let (header, rows) = comparison_table(reports);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| arg(e.to_string()))?;
    crate::volume::write_atomic(path, &bytes).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn worked_example() {
        let f1 = macro_f1(&[0, 0, 1, 2, 3], &[0, 1, 1, 2, 3]).unwrap();
        assert!((f1 - 250.0 / 3.0).abs() < 1e-12);
        assert_eq!(round2(f1), 83.33);
    }

    #[test]
    fn perfect_and_absent_classes() {
        assert_eq!(macro_f1(&[0, 1, 2, 3], &[0, 1, 2, 3]).unwrap(), 100.0);
        // class 3 never appears: 3 perfect classes, one 0
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 75.0);
    }

    #[test]
    fn argument_errors() {
        assert!(macro_f1(&[0, 1], &[0]).is_err());
        assert!(macro_f1(&[0, 4], &[0, 1]).is_err());
        assert!(macro_f1(&[], &[]).is_err());
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn mean_of_two_one_hots() {
        let a = array![[1.0, 0.0, 0.0, 0.0]];
        let b = array![[0.0, 1.0, 0.0, 0.0]];
        assert_eq!(ensemble_probs(&[a, b], None).unwrap(), array![[0.5, 0.5, 0.0, 0.0]]);
    }

    #[test]
    fn ensemble_shape_errors() {
        let a = array![[1.0, 0.0, 0.0, 0.0]];
        let b = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        assert!(ensemble_probs(&[a.clone(), b], None).is_err());
        assert!(ensemble_probs(&[], None).is_err());
        assert!(ensemble_probs(&[a.clone()], Some(&[1.0, 2.0])).is_err());
        assert!(ensemble_probs(&[array![[0.5, 0.0, 0.0, 0.0]]], None).is_err());
    }

    #[test]
    fn majority_vote_counts_argmaxes() {
        let a = array![[0.6, 0.4, 0.0, 0.0]];
        let b = array![[0.1, 0.9, 0.0, 0.0]];
        let c = array![[0.0, 0.7, 0.3, 0.0]];
        let v = majority_vote(&[a, b, c], None).unwrap();
        assert_eq!(argmax_rows(&v), vec![1]);
        assert!((v.row(0).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_rounds_only_on_output() {
        let probs = array![
            [0.9, 0.1, 0.0, 0.0],
            [0.2, 0.7, 0.1, 0.0],
            [0.0, 0.6, 0.4, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0]
        ];
        let r = make_report(&[0, 0, 1, 2, 3], &probs, "train-val", "2d", "abc").unwrap();
        assert_eq!(r.macro_f1, 250.0 / 3.0);
        assert_eq!(r.confusion.0[0], [1, 1, 0, 0]);
        assert_eq!(r.confusion.total(), 5);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["macro_f1"], 83.33);
        assert_eq!(json["per_class"][0]["f1"], 66.67);
        assert_eq!(json["confusion"][0], serde_json::json!([1, 1, 0, 0]));
    }

    #[test]
    fn comparison_table_pivots_scenarios() {
        let probs = array![[1.0, 0.0, 0.0, 0.0]];
        let mut reports = Vec::new();
        for model in ["2d", "3d"] {
            for fold in 1..=2 {
                reports.push(make_report(&[0], &probs, &format!("fold-{fold}"), model, "h").unwrap());
            }
        }
        let (header, rows) = comparison_table(&reports);
        assert_eq!(header, vec!["model", "fold-1", "fold-2"]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1], vec!["3d", "25.00", "25.00"]);
    }
}
