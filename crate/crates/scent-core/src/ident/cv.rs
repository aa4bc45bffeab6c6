//! Stratified k-fold cross-validation and multi-observation combining.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::forest::{train_forest_on, ForestParams};
use super::knn::KnnModel;
use super::metrics::{compute_metrics, ConfusionMatrix, EvalReport};
use super::tree::{argmax, train_tree_on, TrainError, TreeParams};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum ModelSpec {
    Tree(TreeParams),
    Forest(ForestParams),
    Knn { k: usize },
}

/// Cross-validation outcome: one probability vector per dataset row (each
/// predicted by the model not trained on its fold) plus the pooled report.
pub struct CvOutcome {
    pub row_probs: Vec<Vec<f64>>,
    pub report: EvalReport,
    /// Classes with fewer rows than folds (joined folds unstratified).
    pub small_classes: Vec<String>,
}

/// Stratified fold assignment: per-class shuffle, then round-robin deal.
/// Fold sizes per class differ by at most one.
pub fn stratified_folds(ds: &Dataset, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; ds.rows.len()];
    for class in 0..ds.n_classes() {
        let mut members: Vec<usize> = ds
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        for (pos, row) in members.into_iter().enumerate() {
            assignment[row] = pos % k;
        }
    }
    assignment
}

/// 10-fold (by default) cross-validation with pooled predictions.
pub fn kfold_cv(
    ds: &Dataset,
    spec: &ModelSpec,
    k: usize,
    seed: u64,
) -> Result<CvOutcome, TrainError> {
    let k = k.max(2);
    let assignment = stratified_folds(ds, k, seed);
    let small_classes: Vec<String> = (0..ds.n_classes())
        .filter(|&c| {
            let count = ds.rows.iter().filter(|r| r.label == c).count();
            count > 0 && count < k
        })
        .map(|c| ds.classes[c].clone())
        .collect();

    let mut row_probs: Vec<Vec<f64>> = vec![Vec::new(); ds.rows.len()];
    let mut fold_macro_f1 = Vec::with_capacity(k);
    for fold in 0..k {
        let train_idx: Vec<usize> = (0..ds.rows.len())
            .filter(|&i| assignment[i] != fold)
            .collect();
        let test_idx: Vec<usize> = (0..ds.rows.len())
            .filter(|&i| assignment[i] == fold)
            .collect();
        if test_idx.is_empty() {
            continue;
        }
        let predict: Box<dyn Fn(&[f64]) -> Vec<f64>> = match spec {
            ModelSpec::Tree(params) => {
                let model = train_tree_on(ds, &train_idx, params)?;
                Box::new(move |x| model.predict_probs(x).to_vec())
            }
            ModelSpec::Forest(params) => {
                let model = train_forest_on(ds, &train_idx, params)?;
                Box::new(move |x| model.predict_probs(x))
            }
            ModelSpec::Knn { k } => {
                let model = KnnModel::fit_on(ds, &train_idx, *k)?;
                Box::new(move |x| model.predict_probs(x))
            }
        };
        let mut fold_cm = ConfusionMatrix::new(ds.classes.clone());
        for &i in &test_idx {
            let probs = predict(&ds.rows[i].features);
            fold_cm.record(ds.rows[i].label, argmax(&probs));
            row_probs[i] = probs;
        }
        fold_macro_f1.push(compute_metrics(fold_cm).macro_f1);
    }

    let mut cm = ConfusionMatrix::new(ds.classes.clone());
    for (i, probs) in row_probs.iter().enumerate() {
        cm.record(ds.rows[i].label, argmax(probs));
    }
    let mut report = compute_metrics(cm);
    report.fold_macro_f1 = fold_macro_f1;
    Ok(CvOutcome {
        row_probs,
        report,
        small_classes,
    })
}

/// Average per-row probability vectors over disjoint groups of `n`
/// consecutive windows of the same device; the remainder group is still
/// averaged. Returns one (actual class, combined probabilities) pair per
/// group. `n = 1` is the identity on predictions.
pub fn combine_observations(
    ds: &Dataset,
    row_probs: &[Vec<f64>],
    n: usize,
) -> Vec<(usize, Vec<f64>)> {
    assert!(n >= 1, "group size must be at least 1");
    // group rows by device preserving dataset (time) order
    let mut device_rows: Vec<(&str, Vec<usize>)> = Vec::new();
    for (i, row) in ds.rows.iter().enumerate() {
        match device_rows.iter_mut().find(|(d, _)| *d == row.device) {
            Some((_, v)) => v.push(i),
            None => device_rows.push((&row.device, vec![i])),
        }
    }
    for (_, rows) in &mut device_rows {
        rows.sort_by_key(|&i| ds.rows[i].window_index);
    }
    let mut out = Vec::new();
    for (_, rows) in &device_rows {
        for chunk in rows.chunks(n) {
            let n_classes = row_probs[chunk[0]].len();
            let mut mean = vec![0.0; n_classes];
            for &i in chunk {
                for (m, p) in mean.iter_mut().zip(&row_probs[i]) {
                    *m += p;
                }
            }
            for m in &mut mean {
                *m /= chunk.len() as f64;
            }
            out.push((ds.rows[chunk[0]].label, mean));
        }
    }
    out
}

/// Evaluate combined observations into a report.
pub fn combined_report(ds: &Dataset, row_probs: &[Vec<f64>], n: usize) -> EvalReport {
    let combined = combine_observations(ds, row_probs, n);
    let mut cm = ConfusionMatrix::new(ds.classes.clone());
    for (actual, probs) in &combined {
        cm.record(*actual, argmax(probs));
    }
    let mut report = compute_metrics(cm);
    report.observations_combined = n;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ident::dataset::Row;

    fn toy(n_per_class: usize, n_classes: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        for c in 0..n_classes {
            for w in 0..n_per_class {
                rows.push(Row {
                    features: vec![c as f64 * 5.0 + rng.gen::<f64>(), rng.gen::<f64>() * 2.0],
                    label: c,
                    device: format!("d{c}"),
                    window_index: w as u64,
                });
            }
        }
        Dataset {
            feature_names: vec!["f0".into(), "f1".into()],
            rows,
            classes: (0..n_classes).map(|c| format!("c{c}")).collect(),
        }
    }

    #[test]
    fn folds_are_balanced_disjoint_and_cover() {
        let ds = toy(25, 3, 1);
        let assignment = stratified_folds(&ds, 10, 42);
        assert_eq!(assignment.len(), ds.rows.len());
        for class in 0..3 {
            let mut per_fold = vec![0usize; 10];
            for (i, &f) in assignment.iter().enumerate() {
                if ds.rows[i].label == class {
                    per_fold[f] += 1;
                }
            }
            let min = per_fold.iter().min().unwrap();
            let max = per_fold.iter().max().unwrap();
            assert!(max - min <= 1, "per-class fold sizes differ by more than 1");
        }
    }

    #[test]
    fn same_seed_same_report() {
        let ds = toy(20, 3, 2);
        let spec = ModelSpec::Forest(ForestParams {
            n_trees: 5,
            seed: 9,
            ..Default::default()
        });
        let a = kfold_cv(&ds, &spec, 5, 7).unwrap();
        let b = kfold_cv(&ds, &spec, 5, 7).unwrap();
        assert_eq!(a.report.macro_f1, b.report.macro_f1);
        assert_eq!(a.row_probs, b.row_probs);
    }

    #[test]
    fn every_row_predicted_once() {
        let ds = toy(12, 2, 3);
        let spec = ModelSpec::Knn { k: 3 };
        let out = kfold_cv(&ds, &spec, 4, 1).unwrap();
        assert!(out.row_probs.iter().all(|p| !p.is_empty()));
        assert_eq!(out.report.confusion.total(), ds.rows.len() as u64);
    }

    #[test]
    fn small_class_flagged() {
        let mut ds = toy(20, 2, 4);
        // add a 3-row class with k=10
        for w in 0..3 {
            ds.rows.push(Row {
                features: vec![100.0 + w as f64, 0.0],
                label: 2,
                device: "d2".into(),
                window_index: w,
            });
        }
        ds.classes.push("c2".into());
        let out = kfold_cv(&ds, &ModelSpec::Knn { k: 1 }, 10, 1).unwrap();
        assert_eq!(out.small_classes, vec!["c2".to_string()]);
    }

    #[test]
    fn combine_n1_is_identity() {
        let ds = toy(10, 2, 5);
        let out = kfold_cv(&ds, &ModelSpec::Knn { k: 3 }, 5, 1).unwrap();
        let combined = combine_observations(&ds, &out.row_probs, 1);
        assert_eq!(combined.len(), ds.rows.len());
        let direct: Vec<usize> = out.row_probs.iter().map(|p| argmax(p)).collect();
        // per-device ordering preserves window order, compare as multisets of
        // (label, argmax)
        let mut a: Vec<(usize, usize)> = combined.iter().map(|(l, p)| (*l, argmax(p))).collect();
        let mut b: Vec<(usize, usize)> = ds
            .rows
            .iter()
            .zip(&direct)
            .map(|(r, &p)| (r.label, p))
            .collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }

    #[test]
    fn combine_averages_probabilities() {
        let ds = Dataset {
            feature_names: vec!["f0".into()],
            rows: vec![
                Row {
                    features: vec![0.0],
                    label: 1,
                    device: "d".into(),
                    window_index: 0,
                },
                Row {
                    features: vec![0.0],
                    label: 1,
                    device: "d".into(),
                    window_index: 1,
                },
            ],
            classes: vec!["a".into(), "b".into()],
        };
        let probs = vec![vec![0.6, 0.4], vec![0.3, 0.7]];
        let combined = combine_observations(&ds, &probs, 2);
        assert_eq!(combined.len(), 1);
        let (_, p) = &combined[0];
        assert!((p[0] - 0.45).abs() < 1e-12);
        assert!((p[1] - 0.55).abs() < 1e-12);
        assert_eq!(argmax(p), 1);
    }

    #[test]
    fn remainder_group_still_averaged() {
        let ds = toy(5, 2, 6);
        let probs: Vec<Vec<f64>> = ds.rows.iter().map(|_| vec![1.0, 0.0]).collect();
        let combined = combine_observations(&ds, &probs, 3);
        // 5 rows per device -> groups of 3 and 2, per two devices
        assert_eq!(combined.len(), 4);
    }
}
