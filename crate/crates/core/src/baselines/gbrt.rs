//! Least-squares gradient boosting over depth-limited regression trees.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    Lat,
    Lon,
}

impl Feature {
    pub fn of(self, p: &GeoPoint) -> f64 {
        match self {
            Feature::Lat => p.lat(),
            Feature::Lon => p.lon(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbrtConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub features: Vec<Feature>,
}

impl Default for GbrtConfig {
    fn default() -> Self {
        Self { rounds: 10, max_depth: 3, learning_rate: 0.3, min_samples_leaf: 1, features: vec![Feature::Lat, Feature::Lon] }
    }
}

impl GbrtConfig {
    pub fn validate(&self) -> Result<(), GbrtError> {
        if self.rounds == 0 {
            return Err(GbrtError::InvalidConfig("rounds must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(GbrtError::InvalidConfig(format!("learning_rate must be in (0, 1], got {}", self.learning_rate)));
        }
        if self.min_samples_leaf == 0 {
            return Err(GbrtError::InvalidConfig("min_samples_leaf must be >= 1".into()));
        }
        if self.features.is_empty() {
            return Err(GbrtError::InvalidConfig("no features selected".into()));
        }
        Ok(())
    }

    pub fn row(&self, p: &GeoPoint) -> Vec<f64> {
        self.features.iter().map(|f| f.of(p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GbrtError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("all feature rows are identical but targets vary")]
    DegenerateFeatures,
    #[error("row {row} has {got} features, expected {expected}")]
    RaggedRows { row: usize, got: usize, expected: usize },
    #[error("non-finite value in row {0}")]
    NonFinite(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf { value: f64 },
    /// Rows with `x[feature] <= threshold` go left.
    Split { feature: usize, threshold: f64, left: Box<TreeNode>, right: Box<TreeNode> },
}

impl TreeNode {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn leaves(&self) -> Vec<f64> {
        match self {
            TreeNode::Leaf { value } => vec![*value],
            TreeNode::Split { left, right, .. } => {
                let mut v = left.leaves();
                v.extend(right.leaves());
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbrtModel {
    pub init_value: f64,
    pub learning_rate: f64,
    pub n_features: usize,
    pub trees: Vec<TreeNode>,
    /// Training SSE before any tree and after each round.
    pub train_sse: Vec<f64>,
}

impl GbrtModel {
    pub fn constant(value: f64, n_features: usize, learning_rate: f64) -> Self {
        Self { init_value: value, learning_rate, n_features, trees: Vec::new(), train_sse: vec![0.0] }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

pub fn gbrt_predict(model: &GbrtModel, x: &[f64]) -> f64 {
    model.init_value + model.learning_rate * model.trees.iter().map(|t| t.predict(x)).sum::<f64>()
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

fn sse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    values.map(|v| (v - mean) * (v - mean)).sum()
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    max_depth: usize,
    min_leaf: usize,
}

struct BestSplit {
    sse: f64,
    feature: usize,
    threshold: f64,
}

impl Grower<'_> {
    fn grow(&self, rows: &[usize], r: &[f64], depth: usize) -> TreeNode {
        let leaf = || TreeNode::Leaf { value: rows.iter().map(|&i| r[i]).sum::<f64>() / rows.len() as f64 };
        if depth >= self.max_depth || rows.len() < 2 * self.min_leaf {
            return leaf();
        }
        let parent = sse(rows.iter().map(|&i| r[i]));
        let Some(best) = self.best_split(rows, r) else { return leaf() };
        if best.sse.partial_cmp(&parent) != Some(std::cmp::Ordering::Less) {
            return leaf();
        }
        let (left, right): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| self.x[i][best.feature] <= best.threshold);
        TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(self.grow(&left, r, depth + 1)),
            right: Box::new(self.grow(&right, r, depth + 1)),
        }
    }

    /// Exhaustive search over midpoints of consecutive distinct values.
    /// Ties keep the lower feature index, then the lower threshold.
    fn best_split(&self, rows: &[usize], r: &[f64]) -> Option<BestSplit> {
        let n = rows.len();
        let mut best: Option<BestSplit> = None;
        for f in 0..self.x[0].len() {
            let mut order = rows.to_vec();
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let total: f64 = order.iter().map(|&i| r[i]).sum();
            let total_sq: f64 = order.iter().map(|&i| r[i] * r[i]).sum();
            let (mut s, mut sq) = (0.0, 0.0);
            for k in 0..n - 1 {
                let v = r[order[k]];
                s += v;
                sq += v * v;
                let (a, b) = (self.x[order[k]][f], self.x[order[k + 1]][f]);
                let nl = k + 1;
                let nr = n - nl;
                if a == b || nl < self.min_leaf || nr < self.min_leaf {
                    continue;
                }
                let sse_l = (sq - s * s / nl as f64).max(0.0);
                let sse_r = ((total_sq - sq) - (total - s) * (total - s) / nr as f64).max(0.0);
                let cand = sse_l + sse_r;
                if best.as_ref().is_none_or(|b| cand < b.sse) {
                    best = Some(BestSplit { sse: cand, feature: f, threshold: a + (b - a) / 2.0 });
                }
            }
        }
        best
    }
}

/// Fits `cfg.rounds` trees to the residuals of squared-error loss.
///
/// Rows are put in a canonical order first so that any permutation of the
/// same training set yields the same model.
pub fn gbrt_fit(x: &[Vec<f64>], y: &[f64], cfg: &GbrtConfig) -> Result<GbrtModel, GbrtError> {
    cfg.validate()?;
    if x.len() != y.len() || x.len() < 2 {
        return Err(GbrtError::TooFewSamples(x.len().min(y.len())));
    }
    let width = x[0].len();
    for (i, row) in x.iter().enumerate() {
        if row.len() != width {
            return Err(GbrtError::RaggedRows { row: i, got: row.len(), expected: width });
        }
        if row.iter().chain([&y[i]]).any(|v| !v.is_finite()) {
            return Err(GbrtError::NonFinite(i));
        }
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| cmp_rows(&x[a], &x[b]).then(y[a].total_cmp(&y[b])));
    let xs: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
    let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();

    let n = ys.len() as f64;
    let init = ys.iter().sum::<f64>() / n;
    let constant_targets = ys.iter().all(|v| *v == ys[0]);
    if constant_targets {
        return Ok(GbrtModel {
            init_value: ys[0],
            learning_rate: cfg.learning_rate,
            n_features: width,
            trees: vec![TreeNode::Leaf { value: 0.0 }; cfg.rounds],
            train_sse: vec![0.0; cfg.rounds + 1],
        });
    }
    if xs.iter().all(|row| cmp_rows(row, &xs[0]).is_eq()) {
        return Err(GbrtError::DegenerateFeatures);
    }

    let grower = Grower { x: &xs, max_depth: cfg.max_depth, min_leaf: cfg.min_samples_leaf };
    let all: Vec<usize> = (0..xs.len()).collect();
    let mut pred = vec![init; xs.len()];
    let residual_sse = |pred: &[f64]| ys.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum::<f64>();
    let mut train_sse = vec![residual_sse(&pred)];
    let mut trees = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let r: Vec<f64> = ys.iter().zip(&pred).map(|(t, p)| t - p).collect();
        let tree = grower.grow(&all, &r, 0);
        for (p, row) in pred.iter_mut().zip(&xs) {
            *p += cfg.learning_rate * tree.predict(row);
        }
        let cur = residual_sse(&pred);
        let prev = *train_sse.last().expect("non-empty");
        debug_assert!(cur <= prev + 1e-9 * prev.max(1.0), "training loss rose from {prev} to {cur}");
        train_sse.push(cur);
        trees.push(tree);
    }
    Ok(GbrtModel { init_value: init, learning_rate: cfg.learning_rate, n_features: width, trees, train_sse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    fn one_d(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|v| vec![*v]).collect()
    }

    fn mse(m: &GbrtModel, x: &[Vec<f64>], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(r, t)| (gbrt_predict(m, r) - t).powi(2)).sum::<f64>() / y.len() as f64
    }

    #[test]
    fn constant_targets() {
        let x = one_d(&[0.0, 1.0, 2.0]);
        let m = gbrt_fit(&x, &[4.0; 3], &GbrtConfig::default()).unwrap();
        assert!(m.trees.iter().flat_map(TreeNode::leaves).all(|v| v == 0.0));
        assert_eq!(gbrt_predict(&m, &[17.0]), 4.0);
        let same = vec![vec![1.0, 1.0]; 3];
        assert_eq!(gbrt_predict(&gbrt_fit(&same, &[2.0; 3], &GbrtConfig::default()).unwrap(), &[1.0, 1.0]), 2.0);
        assert_eq!(gbrt_fit(&same, &[1.0, 2.0, 3.0], &GbrtConfig::default()), Err(GbrtError::DegenerateFeatures));
    }

    #[test]
    fn step_function_single_split() {
        let x = one_d(&[0.0, 1.0, 2.0, 3.0]);
        let y = [0.0, 0.0, 1.0, 1.0];
        let cfg = GbrtConfig { rounds: 1, max_depth: 1, learning_rate: 1.0, features: vec![Feature::Lon], ..Default::default() };
        let m = gbrt_fit(&x, &y, &cfg).unwrap();
        // oracle: score every midpoint by hand
        let mids = [0.5, 1.5, 2.5];
        let score = |t: f64| {
            let left: Vec<f64> = x.iter().zip(y).filter(|(a, _)| a[0] <= t).map(|(_, b)| b).collect();
            let right: Vec<f64> = x.iter().zip(y).filter(|(a, _)| a[0] > t).map(|(_, b)| b).collect();
            sse(left.into_iter()) + sse(right.into_iter())
        };
        let best = mids.iter().copied().min_by(|a, b| score(*a).total_cmp(&score(*b))).unwrap();
        assert_eq!(best, 1.5);
        match &m.trees[0] {
            TreeNode::Split { feature: 0, threshold, .. } => assert_eq!(*threshold, best),
            other => panic!("expected split, got {other:?}"),
        }
        let preds: Vec<f64> = x.iter().map(|r| gbrt_predict(&m, r)).collect();
        assert_eq!(preds, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(mse(&m, &x, &y), 0.0);
    }

    #[test]
    fn more_rounds_never_worse() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64 / 4.0).collect();
        let y: Vec<f64> = xs.iter().map(|v| if *v < 3.0 { 1.0 } else if *v < 7.0 { 5.0 } else { 2.0 }).collect();
        let x = one_d(&xs);
        let one = gbrt_fit(&x, &y, &GbrtConfig { rounds: 1, ..Default::default() }).unwrap();
        let ten = gbrt_fit(&x, &y, &GbrtConfig::default()).unwrap();
        assert!(mse(&ten, &x, &y) <= mse(&one, &x, &y));
        assert!(ten.train_sse.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        assert_eq!(ten.trees.len(), 10);
    }

    #[test]
    fn json_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<Vec<f64>> = (0..80).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let y: Vec<f64> = x.iter().map(|r| (r[0] * 6.0).sin() + r[1]).collect();
        let m = gbrt_fit(&x, &y, &GbrtConfig::default()).unwrap();
        let back = GbrtModel::from_json(&m.to_json()).unwrap();
        for _ in 0..100 {
            let q = [rng.random_range(-0.5..1.5), rng.random_range(-0.5..1.5)];
            assert_eq!(gbrt_predict(&m, &q).to_bits(), gbrt_predict(&back, &q).to_bits());
        }
    }

    #[test]
    fn errors() {
        assert_eq!(gbrt_fit(&one_d(&[1.0]), &[1.0], &GbrtConfig::default()), Err(GbrtError::TooFewSamples(1)));
        let bad = GbrtConfig { learning_rate: 0.0, ..Default::default() };
        assert!(matches!(gbrt_fit(&one_d(&[1.0, 2.0]), &[1.0, 2.0], &bad), Err(GbrtError::InvalidConfig(_))));
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            rows in prop::collection::vec((0u8..8, 0u8..8, -5.0f64..5.0), 2..40),
            seed in any::<u64>(),
        ) {
            let x: Vec<Vec<f64>> = rows.iter().map(|(a, b, _)| vec![*a as f64, *b as f64]).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let fit = gbrt_fit(&x, &y, &GbrtConfig::default());
            let mut idx: Vec<usize> = (0..x.len()).collect();
            idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let px: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
            let py: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            prop_assert_eq!(fit.clone(), gbrt_fit(&px, &py, &GbrtConfig::default()));
            if let Ok(m) = fit {
                prop_assert!(m.train_sse.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].max(1.0)));
            }
        }
    }
}
