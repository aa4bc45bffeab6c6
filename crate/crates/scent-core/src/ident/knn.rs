//! k-nearest neighbours on standardized features.

use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::tree::TrainError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub n_classes: usize,
    /// Train-set standardization parameters; test rows reuse them.
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    train_x: Vec<Vec<f64>>,
    train_y: Vec<usize>,
}

impl KnnModel {
    /// Fit on the row subset `idx`: stores standardized training rows.
    pub fn fit_on(ds: &Dataset, idx: &[usize], k: usize) -> Result<Self, TrainError> {
        if idx.is_empty() {
            return Err(TrainError::DegenerateData("zero training rows".into()));
        }
        let d = ds.n_features();
        let n = idx.len() as f64;
        let mut means = vec![0.0; d];
        for &i in idx {
            for (m, v) in means.iter_mut().zip(&ds.rows[i].features) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n;
        }
        let mut stds = vec![0.0; d];
        for &i in idx {
            for (s, (v, m)) in stds.iter_mut().zip(ds.rows[i].features.iter().zip(&means)) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut stds {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                *s = 1.0; // constant column, leave centered
            }
        }
        let standardize = |features: &[f64]| -> Vec<f64> {
            features
                .iter()
                .zip(means.iter().zip(&stds))
                .map(|(v, (m, s))| (v - m) / s)
                .collect()
        };
        let train_x = idx
            .iter()
            .map(|&i| standardize(&ds.rows[i].features))
            .collect();
        let train_y = idx.iter().map(|&i| ds.rows[i].label).collect();
        Ok(KnnModel {
            k: k.max(1),
            n_classes: ds.n_classes(),
            means,
            stds,
            train_x,
            train_y,
        })
    }

    pub fn fit(ds: &Dataset, k: usize) -> Result<Self, TrainError> {
        let all: Vec<usize> = (0..ds.rows.len()).collect();
        Self::fit_on(ds, &all, k)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Neighbor class frequencies among the k nearest (Euclidean); distance
    /// ties break by training-row order.
    pub fn predict_probs(&self, x: &[f64]) -> Vec<f64> {
        let q = self.standardize(x);
        let mut dists: Vec<(f64, usize)> = self
            .train_x
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let d2: f64 = row.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2, i)
            })
            .collect();
        let k = self.k.min(dists.len());
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut counts = vec![0u64; self.n_classes];
        for (_, i) in dists.iter().take(k) {
            counts[self.train_y[*i]] += 1;
        }
        counts.iter().map(|&c| c as f64 / k as f64).collect()
    }

    pub fn predict_class(&self, x: &[f64]) -> usize {
        super::tree::argmax(&self.predict_probs(x))
    }

    pub fn train_rows(&self) -> &[Vec<f64>] {
        &self.train_x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ident::dataset::Row;

    fn toy(points: &[(Vec<f64>, usize)], n_classes: usize) -> Dataset {
        Dataset {
            feature_names: (0..points[0].0.len()).map(|i| format!("f{i}")).collect(),
            rows: points
                .iter()
                .enumerate()
                .map(|(i, (f, l))| Row {
                    features: f.clone(),
                    label: *l,
                    device: format!("d{l}"),
                    window_index: i as u64,
                })
                .collect(),
            classes: (0..n_classes).map(|i| format!("c{i}")).collect(),
        }
    }

    #[test]
    fn k1_on_training_point_returns_its_class() {
        let points = vec![
            (vec![0.0, 0.0], 0usize),
            (vec![5.0, 5.0], 1),
            (vec![9.0, 1.0], 1),
        ];
        let ds = toy(&points, 2);
        let model = KnnModel::fit(&ds, 1).unwrap();
        assert_eq!(model.predict_probs(&[5.0, 5.0]), vec![0.0, 1.0]);
        assert_eq!(model.predict_class(&[0.0, 0.0]), 0);
    }

    #[test]
    fn k3_neighbor_frequencies() {
        let points = vec![
            (vec![0.0], 0usize),
            (vec![0.1], 0),
            (vec![0.2], 1),
            (vec![9.0], 1),
        ];
        let ds = toy(&points, 2);
        let model = KnnModel::fit(&ds, 3).unwrap();
        let p = model.predict_probs(&[0.05]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let points: Vec<(Vec<f64>, usize)> = (0..60)
            .map(|_| {
                let cls = rng.gen_range(0..3usize);
                let f: Vec<f64> = (0..4)
                    .map(|_| cls as f64 * 2.0 + rng.gen::<f64>())
                    .collect();
                (f, cls)
            })
            .collect();
        let ds = toy(&points, 3);
        let model = KnnModel::fit(&ds, 5).unwrap();
        for _ in 0..500 {
            let q: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 6.0).collect();
            // oracle: exhaustive scan over standardized rows
            let qs: Vec<f64> = q
                .iter()
                .zip(model.means.iter().zip(&model.stds))
                .map(|(v, (m, s))| (v - m) / s)
                .collect();
            let mut scan: Vec<(f64, usize)> = model
                .train_rows()
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    (
                        row.iter()
                            .zip(&qs)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>(),
                        i,
                    )
                })
                .collect();
            scan.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut counts = [0u64; 3];
            for (_, i) in scan.iter().take(5) {
                counts[points[*i].1] += 1;
            }
            let expected: Vec<f64> = counts.iter().map(|&c| c as f64 / 5.0).collect();
            assert_eq!(model.predict_probs(&q), expected);
        }
    }

    #[test]
    fn train_fold_means_are_centered() {
        let points: Vec<(Vec<f64>, usize)> = (0..20)
            .map(|i| (vec![i as f64, (i * i) as f64], i % 2))
            .collect();
        let ds = toy(&points, 2);
        let model = KnnModel::fit(&ds, 3).unwrap();
        for d in 0..2 {
            let mean: f64 = model.train_rows().iter().map(|r| r[d]).sum::<f64>()
                / model.train_rows().len() as f64;
            assert!(mean.abs() < 1e-9);
        }
    }
}
