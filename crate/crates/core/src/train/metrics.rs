//! Classification metrics and confusion matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub total: usize,
    /// Overall fraction correct.
    pub wa: f64,
    /// Mean recall over classes that occur in the targets.
    pub ua: f64,
    /// Support-weighted F1.
    pub wf1: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    /// `confusion[i][j]` counts true class `i` predicted as `j`.
    pub confusion: Vec<Vec<usize>>,
    /// Rows of `confusion` divided by their sums; empty rows stay zero.
    pub normalized: Vec<Vec<f64>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_predictions(
        classes: &[String],
        targets: &[usize],
        predictions: &[usize],
    ) -> Result<Self> {
        let n = classes.len();
        if targets.len() != predictions.len() {
            return Err(Error::invalid(
                "metrics",
                format!(
                    "{} targets vs {} predictions",
                    targets.len(),
                    predictions.len()
                ),
            ));
        }
        if targets.is_empty() {
            return Err(Error::EmptySplit("evaluation".into()));
        }
        let mut confusion = vec![vec![0usize; n]; n];
        for (&t, &p) in targets.iter().zip(predictions) {
            for c in [t, p] {
                if c >= n {
                    return Err(Error::ClassOutOfRange {
                        class: c,
                        n_classes: n,
                    });
                }
            }
            confusion[t][p] += 1;
        }
        Ok(Self::from_confusion(classes, confusion))
    }

    /// Builds the report from a square count matrix.
    pub fn from_confusion(classes: &[String], confusion: Vec<Vec<usize>>) -> Self {
        let n = confusion.len();
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..n).map(|i| confusion[i][i]).sum();
        let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let predicted: Vec<usize> = (0..n)
            .map(|j| confusion.iter().map(|r| r[j]).sum())
            .collect();
        let recall: Vec<f64> = (0..n).map(|i| ratio(confusion[i][i], support[i])).collect();
        let precision: Vec<f64> = (0..n)
            .map(|j| ratio(confusion[j][j], predicted[j]))
            .collect();
        let f1: Vec<f64> = recall
            .iter()
            .zip(&precision)
            .map(|(&r, &p)| {
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            })
            .collect();
        let present: Vec<usize> = (0..n).filter(|&i| support[i] > 0).collect();
        let ua = if present.is_empty() {
            0.0
        } else {
            present.iter().map(|&i| recall[i]).sum::<f64>() / present.len() as f64
        };
        let wf1 = (0..n).map(|i| ratio(support[i], total) * f1[i]).sum();
        let normalized = confusion
            .iter()
            .zip(&support)
            .map(|(row, &s)| row.iter().map(|&c| ratio(c, s)).collect())
            .collect();
        Self {
            classes: classes.to_vec(),
            total,
            wa: ratio(correct, total),
            ua,
            wf1,
            recall,
            precision,
            f1,
            support,
            confusion,
            normalized,
        }
    }
}
