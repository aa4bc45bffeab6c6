//! Device identification from windowed traffic features: dataset ingestion,
//! tree-based classifiers, k-nearest neighbours, cross-validation and
//! multi-observation combining.

pub mod cv;
pub mod dataset;
pub mod forest;
pub mod knn;
pub mod metrics;
pub mod tree;

pub use cv::{combine_observations, kfold_cv, CvOutcome, ModelSpec};
pub use dataset::{load_and_clean, Dataset, DatasetError, Row};
pub use forest::{feature_importance, train_forest, ForestModel, ForestParams};
pub use knn::KnnModel;
pub use metrics::{compute_metrics, ConfusionMatrix, EvalReport};
pub use tree::{train_tree, TreeModel, TreeParams};
