//! Spatial sampling order and train/validation/test splitting.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_distance, GeoPoint};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SampleError {
    #[error("empty input")]
    EmptyInput,
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
}

/// Farthest-first traversal of a point set.
///
/// `min_dist_m[k]` is the distance from `ids[k]` to the nearest point selected
/// before it (0 for the first point, the seed-pair distance for the second).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOrder {
    pub ids: Vec<String>,
    pub min_dist_m: Vec<f64>,
}

fn check_ids(points: &[GeoPoint]) -> Result<(), SampleError> {
    if points.is_empty() {
        return Err(SampleError::EmptyInput);
    }
    let mut seen = HashSet::with_capacity(points.len());
    for p in points {
        if !seen.insert(p.id.as_str()) {
            return Err(SampleError::DuplicateId(p.id.clone()));
        }
    }
    Ok(())
}

/// Candidate ordering: larger distance wins, then the smaller id.
fn better(d_a: f64, id_a: &str, d_b: f64, id_b: &str) -> bool {
    match d_a.total_cmp(&d_b) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => id_a < id_b,
    }
}

/// Greedy farthest-point traversal seeded by the most distant pair.
///
/// The seed pair is the pair with maximum haversine distance (ties: the
/// lexicographically smallest `(smaller id, larger id)`), emitted smaller id
/// first. Every later step picks the point whose distance to the selected set
/// is largest, ties broken by smallest id.
pub fn farthest_first_order(points: &[GeoPoint]) -> Result<SampleOrder, SampleError> {
    check_ids(points)?;
    let n = points.len();
    if n == 1 {
        return Ok(SampleOrder { ids: vec![points[0].id.clone()], min_dist_m: vec![0.0] });
    }

    // (distance, lo index, hi index) where lo holds the smaller id
    let pair_key = |i: usize, j: usize| -> (f64, usize, usize) {
        let d = haversine_distance(&points[i], &points[j]);
        if points[i].id < points[j].id {
            (d, i, j)
        } else {
            (d, j, i)
        }
    };
    let pair_better = |a: &(f64, usize, usize), b: &(f64, usize, usize)| -> bool {
        match a.0.total_cmp(&b.0) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => {
                (points[a.1].id.as_str(), points[a.2].id.as_str()) < (points[b.1].id.as_str(), points[b.2].id.as_str())
            }
        }
    };
    let (seed_d, first, second) = (0..n - 1)
        .into_par_iter()
        .map(|i| {
            let mut best = pair_key(i, i + 1);
            for j in i + 2..n {
                let cand = pair_key(i, j);
                if pair_better(&cand, &best) {
                    best = cand;
                }
            }
            best
        })
        .reduce_with(|a, b| if pair_better(&b, &a) { b } else { a })
        .expect("at least two points");

    let mut ids = Vec::with_capacity(n);
    let mut min_dist_m = Vec::with_capacity(n);
    ids.push(points[first].id.clone());
    min_dist_m.push(0.0);
    ids.push(points[second].id.clone());
    min_dist_m.push(seed_d);

    let mut selected = vec![false; n];
    selected[first] = true;
    selected[second] = true;
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| {
            haversine_distance(&points[i], &points[first]).min(haversine_distance(&points[i], &points[second]))
        })
        .collect();

    for _ in 2..n {
        let mut pick: Option<usize> = None;
        for i in (0..n).filter(|&i| !selected[i]) {
            pick = match pick {
                Some(b) if !better(nearest[i], &points[i].id, nearest[b], &points[b].id) => Some(b),
                _ => Some(i),
            };
        }
        let k = pick.expect("unselected points remain");
        selected[k] = true;
        ids.push(points[k].id.clone());
        min_dist_m.push(nearest[k]);
        for i in (0..n).filter(|&i| !selected[i]) {
            let d = haversine_distance(&points[i], &points[k]);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }
    Ok(SampleOrder { ids, min_dist_m })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train_frac: 0.6, val_frac: 0.1, test_frac: 0.3, seed: 0 }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(SampleError::InvalidFractions(format!("{fracs:?} must be finite and non-negative")));
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(SampleError::InvalidFractions(format!("{fracs:?} sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn tag_of(&self, id: &str) -> Option<SplitTag> {
        if self.train.iter().any(|x| x == id) {
            Some(SplitTag::Train)
        } else if self.val.iter().any(|x| x == id) {
            Some(SplitTag::Val)
        } else if self.test.iter().any(|x| x == id) {
            Some(SplitTag::Test)
        } else {
            None
        }
    }
}

/// Largest-remainder apportionment of `n` items over `fractions`.
/// Remainder ties go to the earlier slot.
pub fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &slot in order.iter().take(n.saturating_sub(assigned)) {
        sizes[slot] += 1;
    }
    sizes
}

/// Seeded shuffle followed by contiguous slicing into train/val/test.
pub fn split_dataset(ids: &[String], cfg: &SplitConfig) -> Result<Split, SampleError> {
    cfg.validate()?;
    if ids.is_empty() {
        return Err(SampleError::EmptyInput);
    }
    let sizes = apportion(ids.len(), &[cfg.train_frac, cfg.val_frac, cfg.test_frac]);
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let test = shuffled.split_off(sizes[0] + sizes[1]);
    let val = shuffled.split_off(sizes[0]);
    Ok(Split { train: shuffled, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn eq_point(id: &str, lon: f64) -> GeoPoint {
        GeoPoint::new(id, 0.0, lon).unwrap()
    }

    /// Checks the greedy max-min property of every step by exhaustive search.
    pub(crate) fn brute_force_verify(points: &[GeoPoint], order: &SampleOrder) {
        let by_id = |id: &str| points.iter().find(|p| p.id == id).unwrap();
        let mut best = (f64::MIN, "", "");
        for a in points {
            for b in points {
                if a.id < b.id {
                    let d = haversine_distance(a, b);
                    if d > best.0 || (d == best.0 && (a.id.as_str(), b.id.as_str()) < (best.1, best.2)) {
                        best = (d, a.id.as_str(), b.id.as_str());
                    }
                }
            }
        }
        assert_eq!((order.ids[0].as_str(), order.ids[1].as_str()), (best.1, best.2));
        for k in 2..order.ids.len() {
            let chosen: Vec<&GeoPoint> = order.ids[..k].iter().map(|id| by_id(id)).collect();
            let mind = |p: &GeoPoint| chosen.iter().map(|c| haversine_distance(p, c)).fold(f64::INFINITY, f64::min);
            let picked = by_id(&order.ids[k]);
            assert_eq!(mind(picked), order.min_dist_m[k]);
            for p in points.iter().filter(|p| !order.ids[..=k].contains(&p.id)) {
                assert!(mind(p) <= mind(picked), "step {k}: {} beats {}", p.id, picked.id);
            }
        }
    }

    #[test]
    fn single_point() {
        let order = farthest_first_order(&[eq_point("p", 0.0)]).unwrap();
        assert_eq!(order.ids, vec!["p"]);
    }

    #[test]
    fn equatorial_three_points() {
        let pts = [eq_point("lon0", 0.0), eq_point("lon4", 4.0), eq_point("lon10", 10.0)];
        let order = farthest_first_order(&pts).unwrap();
        assert_eq!(order.ids, vec!["lon0", "lon10", "lon4"]);
        brute_force_verify(&pts, &order);
    }

    #[test]
    fn errors() {
        assert_eq!(farthest_first_order(&[]), Err(SampleError::EmptyInput));
        let dup = [eq_point("a", 0.0), eq_point("a", 1.0)];
        assert_eq!(farthest_first_order(&dup), Err(SampleError::DuplicateId("a".into())));
    }

    #[test]
    fn ties_prefer_smaller_id() {
        // square: both diagonals tie
        let pts = [
            GeoPoint::new("d", 0.0, 0.0).unwrap(),
            GeoPoint::new("c", 0.0, 1.0).unwrap(),
            GeoPoint::new("b", 1.0, 0.0).unwrap(),
            GeoPoint::new("a", 1.0, 1.0).unwrap(),
        ];
        let order = farthest_first_order(&pts).unwrap();
        brute_force_verify(&pts, &order);
    }

    #[test]
    fn random_instances_are_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let pts: Vec<GeoPoint> = (0..50)
                .map(|i| GeoPoint::new(format!("s{i:03}"), rng.random_range(35.0..36.0), rng.random_range(139.0..140.0)).unwrap())
                .collect();
            let order = farthest_first_order(&pts).unwrap();
            let mut sorted = order.ids.clone();
            sorted.sort();
            let mut expect: Vec<String> = pts.iter().map(|p| p.id.clone()).collect();
            expect.sort();
            assert_eq!(sorted, expect);
            assert!(order.min_dist_m[2..].windows(2).all(|w| w[1] <= w[0]));
            brute_force_verify(&pts, &order);
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    #[test]
    fn apportionment_examples() {
        assert_eq!(apportion(10, &[0.6, 0.1, 0.3]), vec![6, 1, 3]);
        assert_eq!(apportion(7, &[0.6, 0.1, 0.3]), vec![4, 1, 2]);
        let s = split_dataset(&ids(7), &SplitConfig::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (4, 1, 2));
    }

    #[test]
    fn split_is_deterministic_partition() {
        let input = ids(137);
        for seed in 0..20 {
            let cfg = SplitConfig { seed, ..Default::default() };
            let a = split_dataset(&input, &cfg).unwrap();
            assert_eq!(a, split_dataset(&input, &cfg).unwrap());
            let mut all: Vec<String> = a.train.iter().chain(&a.val).chain(&a.test).cloned().collect();
            all.sort();
            let mut want = input.clone();
            want.sort();
            assert_eq!(all, want);
        }
    }

    #[test]
    fn invalid_fractions() {
        let cfg = SplitConfig { train_frac: 0.5, val_frac: 0.1, test_frac: 0.3, seed: 0 };
        assert!(matches!(split_dataset(&ids(3), &cfg), Err(SampleError::InvalidFractions(_))));
        let cfg = SplitConfig { train_frac: 1.2, val_frac: -0.2, test_frac: 0.0, seed: 0 };
        assert!(matches!(split_dataset(&ids(3), &cfg), Err(SampleError::InvalidFractions(_))));
        assert_eq!(split_dataset(&[], &SplitConfig::default()), Err(SampleError::EmptyInput));
    }
}
