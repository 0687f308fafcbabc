use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_distance, GeoPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnMetric {
    #[default]
    HaversineOnCoords,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    pub k: usize,
    pub metric: KnnMetric,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 5, metric: KnnMetric::HaversineOnCoords }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KnnError {
    #[error("empty training set")]
    EmptyTraining,
    #[error("k = {k} exceeds training size {n}")]
    KTooLarge { k: usize, n: usize },
}

/// Mean target of the `k` training points nearest to `query`; equal
/// distances are ordered by sample id.
pub fn knn_predict(train: &[(GeoPoint, f64)], query: &GeoPoint, cfg: &KnnConfig) -> Result<f64, KnnError> {
    if train.is_empty() {
        return Err(KnnError::EmptyTraining);
    }
    if cfg.k == 0 || cfg.k > train.len() {
        return Err(KnnError::KTooLarge { k: cfg.k, n: train.len() });
    }
    let mut scored: Vec<(f64, &str, f64)> =
        train.iter().map(|(p, y)| (haversine_distance(p, query), p.id.as_str(), *y)).collect();
    let by_rank = |a: &(f64, &str, f64), b: &(f64, &str, f64)| -> Ordering { a.0.total_cmp(&b.0).then(a.1.cmp(b.1)) };
    if cfg.k < scored.len() {
        scored.select_nth_unstable_by(cfg.k - 1, by_rank);
    }
    let mut nearest = scored[..cfg.k].to_vec();
    // summation order fixed so the mean does not depend on input order
    nearest.sort_by(by_rank);
    Ok(nearest.iter().map(|s| s.2).sum::<f64>() / cfg.k as f64)
}
