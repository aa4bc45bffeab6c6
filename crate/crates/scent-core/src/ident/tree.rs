//! CART decision tree with Gini impurity.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dataset::Dataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("degenerate data: {0}")]
    DegenerateData(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features considered per split; `None` means all.
    pub m_try: Option<usize>,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_leaf: 2,
            m_try: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        probs: Vec<f64>,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeModel {
    pub root: Node,
    pub n_classes: usize,
    pub n_features: usize,
    /// Unnormalized total Gini decrease per feature.
    pub importance_raw: Vec<f64>,
}

impl TreeModel {
    pub fn predict_probs(&self, x: &[f64]) -> &[f64] {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { probs } => return probs,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    node = if x[*feature] <= *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub fn predict_class(&self, x: &[f64]) -> usize {
        argmax(self.predict_probs(x))
    }
}

/// First index of the maximum (ties go to the lowest class index).
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

fn gini(counts: &[u64], total: u64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts
        .iter()
        .map(|&c| {
            let p = c as f64 / t;
            p * p
        })
        .sum::<f64>()
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    n_classes: usize,
    n_total: usize,
    params: &'a TreeParams,
    rng: ChaCha8Rng,
    importance: Vec<f64>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    decrease: f64,
}

impl<'a> Builder<'a> {
    fn class_counts(&self, idx: &[usize]) -> Vec<u64> {
        let mut counts = vec![0u64; self.n_classes];
        for &i in idx {
            counts[self.y[i]] += 1;
        }
        counts
    }

    fn find_split(&mut self, idx: &[usize], node_gini: f64) -> Option<BestSplit> {
        let n_features = self.x[0].len();
        let features: Vec<usize> = match self.params.m_try {
            Some(m) if m < n_features => {
                let mut all: Vec<usize> = (0..n_features).collect();
                all.shuffle(&mut self.rng);
                let mut picked = all[..m].to_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n_features).collect(),
        };

        let n = idx.len() as f64;
        let mut best: Option<BestSplit> = None;
        let mut sorted = idx.to_vec();
        for &feat in &features {
            sorted.sort_by(|&a, &b| self.x[a][feat].total_cmp(&self.x[b][feat]));
            let mut left = vec![0u64; self.n_classes];
            let mut right = self.class_counts(&sorted);
            let total = sorted.len() as u64;
            for cut in 1..sorted.len() {
                let moved = sorted[cut - 1];
                left[self.y[moved]] += 1;
                right[self.y[moved]] -= 1;
                let lo = self.x[sorted[cut - 1]][feat];
                let hi = self.x[sorted[cut]][feat];
                if lo == hi {
                    continue;
                }
                if cut < self.params.min_leaf || sorted.len() - cut < self.params.min_leaf {
                    continue;
                }
                let nl = cut as u64;
                let nr = total - nl;
                let child = (nl as f64 / n) * gini(&left, nl) + (nr as f64 / n) * gini(&right, nr);
                // any valid split is acceptable, even at zero gain (children
                // are strictly smaller, so recursion terminates)
                let decrease = node_gini - child;
                let better = match &best {
                    None => true,
                    Some(b) => decrease > b.decrease + 1e-12,
                };
                if better {
                    best = Some(BestSplit {
                        feature: feat,
                        threshold: lo + (hi - lo) / 2.0,
                        decrease,
                    });
                }
            }
        }
        best
    }

    fn build(&mut self, idx: &[usize], depth: usize) -> Node {
        let counts = self.class_counts(idx);
        let node_gini = gini(&counts, idx.len() as u64);
        let leaf = |counts: &[u64]| {
            let n: u64 = counts.iter().sum();
            Node::Leaf {
                probs: counts.iter().map(|&c| c as f64 / n as f64).collect(),
            }
        };
        let depth_ok = self.params.max_depth.map(|d| depth < d).unwrap_or(true);
        if node_gini == 0.0 || !depth_ok || idx.len() < 2 * self.params.min_leaf {
            return leaf(&counts);
        }
        let Some(split) = self.find_split(idx, node_gini) else {
            return leaf(&counts);
        };
        // weighted decrease, sklearn-style
        self.importance[split.feature] += idx.len() as f64 / self.n_total as f64 * split.decrease;
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.x[i][split.feature] <= split.threshold);
        let left = self.build(&left_idx, depth + 1);
        let right = self.build(&right_idx, depth + 1);
        Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }
}

/// Train a CART tree on the (sub)set of rows given by `idx`.
pub fn train_tree_on(
    ds: &Dataset,
    idx: &[usize],
    params: &TreeParams,
) -> Result<TreeModel, TrainError> {
    if idx.is_empty() {
        return Err(TrainError::DegenerateData("zero training rows".into()));
    }
    let x: Vec<Vec<f64>> = idx.iter().map(|&i| ds.rows[i].features.clone()).collect();
    let y: Vec<usize> = idx.iter().map(|&i| ds.rows[i].label).collect();
    let n_features = x[0].len();
    let all: Vec<usize> = (0..x.len()).collect();
    let mut builder = Builder {
        x: &x,
        y: &y,
        n_classes: ds.n_classes(),
        n_total: x.len(),
        params,
        rng: ChaCha8Rng::seed_from_u64(params.seed),
        importance: vec![0.0; n_features],
    };
    let root = builder.build(&all, 0);
    Ok(TreeModel {
        root,
        n_classes: ds.n_classes(),
        n_features,
        importance_raw: builder.importance,
    })
}

/// Train a CART tree on the whole dataset.
pub fn train_tree(ds: &Dataset, params: &TreeParams) -> Result<TreeModel, TrainError> {
    let all: Vec<usize> = (0..ds.rows.len()).collect();
    train_tree_on(ds, &all, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ident::dataset::Row;

    pub(crate) fn toy_dataset(points: &[(Vec<f64>, usize)], n_classes: usize) -> Dataset {
        Dataset {
            feature_names: (0..points[0].0.len()).map(|i| format!("f{i}")).collect(),
            rows: points
                .iter()
                .enumerate()
                .map(|(i, (features, label))| Row {
                    features: features.clone(),
                    label: *label,
                    device: format!("d{label}"),
                    window_index: i as u64,
                })
                .collect(),
            classes: (0..n_classes).map(|i| format!("c{i}")).collect(),
        }
    }

    #[test]
    fn separable_data_gives_depth_one_tree() {
        let points: Vec<(Vec<f64>, usize)> = (0..20)
            .map(|i| {
                let v = i as f64 - 10.0 + if i >= 10 { 0.5 } else { -0.5 };
                (vec![v], if v < 0.0 { 0 } else { 1 })
            })
            .collect();
        let ds = toy_dataset(&points, 2);
        let params = TreeParams {
            min_leaf: 1,
            ..Default::default()
        };
        let tree = train_tree(&ds, &params).unwrap();
        assert!(matches!(
            &tree.root,
            Node::Split { left, right, .. }
                if matches!(**left, Node::Leaf { .. }) && matches!(**right, Node::Leaf { .. })
        ));
        for (x, y) in &points {
            assert_eq!(tree.predict_class(x), *y);
        }
    }

    #[test]
    fn pure_input_single_leaf() {
        let points: Vec<(Vec<f64>, usize)> = (0..5).map(|i| (vec![i as f64], 0)).collect();
        let ds = toy_dataset(&points, 2);
        let tree = train_tree(&ds, &TreeParams::default()).unwrap();
        match &tree.root {
            Node::Leaf { probs } => {
                assert_eq!(probs[0], 1.0);
                assert_eq!(probs[1], 0.0);
            }
            _ => panic!("expected single leaf"),
        }
    }

    #[test]
    fn xor_needs_depth_two() {
        // exhaustive check: no single axis-aligned split separates XOR, two do
        let points = vec![
            (vec![0.0, 0.0], 0usize),
            (vec![0.0, 1.0], 1),
            (vec![1.0, 0.0], 1),
            (vec![1.0, 1.0], 0),
        ];
        let ds = toy_dataset(&points, 2);
        let params = TreeParams {
            min_leaf: 1,
            ..Default::default()
        };
        let tree = train_tree(&ds, &params).unwrap();
        for (x, y) in &points {
            assert_eq!(tree.predict_class(x), *y, "misclassified {x:?}");
        }
        fn depth(node: &Node) -> usize {
            match node {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + depth(left).max(depth(right)),
            }
        }
        assert_eq!(depth(&tree.root), 2);
    }

    #[test]
    fn identical_features_mixed_labels_is_probabilistic_leaf() {
        let points = vec![
            (vec![1.0, 2.0], 0usize),
            (vec![1.0, 2.0], 0),
            (vec![1.0, 2.0], 1),
        ];
        let ds = toy_dataset(&points, 2);
        let tree = train_tree(&ds, &TreeParams::default()).unwrap();
        match &tree.root {
            Node::Leaf { probs } => {
                assert!((probs[0] - 2.0 / 3.0).abs() < 1e-12);
                assert!((probs[1] - 1.0 / 3.0).abs() < 1e-12);
            }
            _ => panic!("expected leaf"),
        }
    }

    #[test]
    fn zero_rows_is_error() {
        let ds = toy_dataset(&[(vec![0.0], 0)], 2);
        assert!(matches!(
            train_tree_on(&ds, &[], &TreeParams::default()),
            Err(TrainError::DegenerateData(_))
        ));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let points: Vec<(Vec<f64>, usize)> = (0..30)
            .map(|i| (vec![(i % 7) as f64, (i % 3) as f64], i % 3))
            .collect();
        let ds = toy_dataset(&points, 3);
        let tree = train_tree(&ds, &TreeParams::default()).unwrap();
        for (x, _) in &points {
            let s: f64 = tree.predict_probs(x).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
