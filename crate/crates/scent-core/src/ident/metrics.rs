//! Confusion matrix and precision / recall / F1 reporting.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// counts[actual][predicted]
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let n = classes.len();
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn record(&mut self, actual: usize, predicted: usize) {
        self.counts[actual][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub confusion: ConfusionMatrix,
    /// Macro F1 per cross-validation fold, when produced by CV.
    #[serde(default)]
    pub fold_macro_f1: Vec<f64>,
    /// Observations combined per prediction (1 = raw windows).
    #[serde(default)]
    pub observations_combined: usize,
}

/// Assemble an [`EvalReport`] from a confusion matrix.
///
/// Precision of a never-predicted class is defined as 0; F1 is 0 when
/// precision + recall is 0. Macro averages are unweighted arithmetic means;
/// weighted averages are support-weighted.
pub fn compute_metrics(confusion: ConfusionMatrix) -> EvalReport {
    let n = confusion.classes.len();
    let mut per_class = Vec::with_capacity(n);
    let total = confusion.total();
    let mut correct = 0u64;
    for c in 0..n {
        let tp = confusion.counts[c][c];
        correct += tp;
        let fn_: u64 = (0..n)
            .filter(|&j| j != c)
            .map(|j| confusion.counts[c][j])
            .sum();
        let fp: u64 = (0..n)
            .filter(|&i| i != c)
            .map(|i| confusion.counts[i][c])
            .sum();
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics {
            class: confusion.classes[c].clone(),
            precision,
            recall,
            f1,
            support: tp + fn_,
        });
    }
    let k = n as f64;
    let macro_precision = per_class.iter().map(|m| m.precision).sum::<f64>() / k;
    let macro_recall = per_class.iter().map(|m| m.recall).sum::<f64>() / k;
    let macro_f1 = per_class.iter().map(|m| m.f1).sum::<f64>() / k;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            per_class
                .iter()
                .map(|m| f(m) * m.support as f64)
                .sum::<f64>()
                / total as f64
        }
    };
    EvalReport {
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        macro_precision,
        macro_recall,
        macro_f1,
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        per_class,
        confusion,
        fold_macro_f1: Vec::new(),
        observations_combined: 1,
    }
}
