//! Random forest: bagged CART trees with per-split feature subsets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::tree::{argmax, train_tree_on, TrainError, TreeModel, TreeParams};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub bootstrap: bool,
    /// Per-split feature subset size; `None` means ceil(sqrt(d)).
    pub m_try: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            bootstrap: true,
            m_try: None,
            max_depth: None,
            min_leaf: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<TreeModel>,
    pub n_classes: usize,
    pub feature_names: Vec<String>,
    /// Normalized total Gini decrease per feature (sums to 1).
    pub importance: Vec<f64>,
}

impl ForestModel {
    /// Mean of per-tree probability vectors.
    pub fn predict_probs(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_classes];
        for tree in &self.trees {
            for (a, p) in acc.iter_mut().zip(tree.predict_probs(x)) {
                *a += p;
            }
        }
        let n = self.trees.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        acc
    }

    pub fn predict_class(&self, x: &[f64]) -> usize {
        argmax(&self.predict_probs(x))
    }
}

/// Train a forest on the row subset `idx`.
pub fn train_forest_on(
    ds: &Dataset,
    idx: &[usize],
    params: &ForestParams,
) -> Result<ForestModel, TrainError> {
    if idx.is_empty() {
        return Err(TrainError::DegenerateData("zero training rows".into()));
    }
    let d = ds.n_features();
    let m_try = params.m_try.unwrap_or((d as f64).sqrt().ceil() as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut importance = vec![0.0; d];
    for t in 0..params.n_trees {
        let sample: Vec<usize> = if params.bootstrap {
            (0..idx.len())
                .map(|_| idx[rng.gen_range(0..idx.len())])
                .collect()
        } else {
            idx.to_vec()
        };
        let tree_params = TreeParams {
            max_depth: params.max_depth,
            min_leaf: params.min_leaf,
            m_try: (m_try < d).then_some(m_try),
            seed: params.seed.wrapping_add(0x9e37).wrapping_mul(t as u64 + 1),
        };
        let tree = train_tree_on(ds, &sample, &tree_params)?;
        for (acc, raw) in importance.iter_mut().zip(&tree.importance_raw) {
            *acc += raw;
        }
        trees.push(tree);
    }
    let total: f64 = importance.iter().sum();
    if total > 0.0 {
        for v in &mut importance {
            *v /= total;
        }
    }
    Ok(ForestModel {
        trees,
        n_classes: ds.n_classes(),
        feature_names: ds.feature_names.clone(),
        importance,
    })
}

pub fn train_forest(ds: &Dataset, params: &ForestParams) -> Result<ForestModel, TrainError> {
    let all: Vec<usize> = (0..ds.rows.len()).collect();
    train_forest_on(ds, &all, params)
}

/// Descending importance ranking plus the `> threshold` subset.
pub fn feature_importance(
    forest: &ForestModel,
    threshold: f64,
) -> (Vec<(String, f64)>, Vec<usize>) {
    let mut ranked: Vec<(usize, f64)> = forest.importance.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let selected: Vec<usize> = ranked
        .iter()
        .filter(|(_, score)| *score > threshold)
        .map(|(i, _)| *i)
        .collect();
    let named = ranked
        .into_iter()
        .map(|(i, score)| (forest.feature_names[i].clone(), score))
        .collect();
    (named, selected)
}
