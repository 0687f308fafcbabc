//! Shallow spatial baselines and ingestion of externally produced
//! predictions.

pub mod external;
pub mod gbrt;
pub mod knn;

pub use external::{import_external_predictions, ExternalPrediction, ImportError};
pub use gbrt::{gbrt_fit, gbrt_predict, Feature, GbrtConfig, GbrtError, GbrtModel, TreeNode};
pub use knn::{knn_predict, KnnConfig, KnnError, KnnMetric};
