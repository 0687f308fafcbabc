//! Rank-based 0.0–9.9 answer discretization.
//!
//! A [`BinScale`] splits the sorted fitting values into 100 equal-count bins.
//! Value of rank `r` (0-based, out of `n`) lands in bin `floor(100 r / n)`,
//! so bin `i` holds ranks `ceil(i n / 100) .. ceil((i + 1) n / 100)`.
//! Boundaries sit halfway between neighbouring bins; a value equal to a
//! boundary belongs to the lower bin.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::task::IndicatorTask;

pub const NUM_BINS: usize = 100;
pub const DEFAULT_MIN_FIT_VALUES: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BinError {
    #[error("too few values to fit a bin scale: got {got}, need at least {min}")]
    TooFewValues { got: usize, min: usize },
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("invalid bin label {0}; expected one decimal in [0.0, 9.9]")]
    InvalidLabel(f64),
    #[error("malformed bin scale: {0}")]
    Malformed(String),
}

/// One of the labels `0.0, 0.1, …, 9.9`, stored as its bin index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BinLabel(u8);

impl BinLabel {
    pub const MIN: BinLabel = BinLabel(0);
    pub const MAX: BinLabel = BinLabel(99);

    pub fn from_index(index: usize) -> Option<Self> {
        (index < NUM_BINS).then_some(BinLabel(index as u8))
    }

    /// Accepts values whose tenfold is an integer in `[0, 99]` (within 1e-9).
    pub fn from_value(value: f64) -> Result<Self, BinError> {
        let scaled = value * 10.0;
        let rounded = scaled.round();
        if !value.is_finite() || (scaled - rounded).abs() > 1e-9 || !(0.0..=99.0).contains(&rounded) {
            return Err(BinError::InvalidLabel(value));
        }
        Ok(BinLabel(rounded as u8))
    }

    /// Nearest label to an arbitrary real, clamped into range.
    pub fn nearest(value: f64) -> Self {
        if value.is_nan() {
            return BinLabel::MIN;
        }
        BinLabel((value * 10.0).round().clamp(0.0, 99.0) as u8)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 10.0
    }
}

impl fmt::Display for BinLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 / 10, self.0 % 10)
    }
}

impl Serialize for BinLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for BinLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        BinLabel::from_value(v).map_err(serde::de::Error::custom)
    }
}

/// Fitted discretization for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinScale {
    pub task: IndicatorTask,
    /// 101 non-decreasing thresholds; `boundaries[0]` is the fitting minimum
    /// and `boundaries[100]` the maximum.
    pub boundaries: Vec<f64>,
    /// Median fitting value of each bin.
    pub representatives: Vec<f64>,
    pub n_fit: usize,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// First rank belonging to bin `i`: `ceil(i n / 100)`.
fn bin_start(i: usize, n: usize) -> usize {
    (i * n).div_ceil(NUM_BINS)
}

pub fn fit_bin_scale(values: &[f64], task: IndicatorTask) -> Result<BinScale, BinError> {
    fit_bin_scale_with_min(values, task, DEFAULT_MIN_FIT_VALUES)
}

/// Fits with a custom minimum sample count. Below 100 values some bins are
/// empty and repeat their neighbour's boundary.
pub fn fit_bin_scale_with_min(values: &[f64], task: IndicatorTask, min_values: usize) -> Result<BinScale, BinError> {
    let min = min_values.max(1);
    if values.len() < min {
        return Err(BinError::TooFewValues { got: values.len(), min });
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(BinError::NonFinite(*bad));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();

    let mut boundaries = Vec::with_capacity(NUM_BINS + 1);
    boundaries.push(sorted[0]);
    for i in 1..NUM_BINS {
        let start = bin_start(i, n);
        let b = if start == 0 {
            sorted[0]
        } else if start >= n {
            sorted[n - 1]
        } else {
            sorted[start - 1] + (sorted[start] - sorted[start - 1]) / 2.0
        };
        boundaries.push(b);
    }
    boundaries.push(sorted[n - 1]);

    let representatives = (0..NUM_BINS)
        .map(|i| {
            let (lo, hi) = (bin_start(i, n), bin_start(i + 1, n));
            if lo < hi {
                median(&sorted[lo..hi])
            } else {
                boundaries[i + 1]
            }
        })
        .collect();

    Ok(BinScale { task, boundaries, representatives, n_fit: n })
}

impl BinScale {
    pub fn validate(&self) -> Result<(), BinError> {
        if self.boundaries.len() != NUM_BINS + 1 || self.representatives.len() != NUM_BINS {
            return Err(BinError::Malformed(format!(
                "expected {} boundaries and {NUM_BINS} representatives, got {} and {}",
                NUM_BINS + 1,
                self.boundaries.len(),
                self.representatives.len()
            )));
        }
        if self.boundaries.iter().chain(&self.representatives).any(|v| !v.is_finite()) {
            return Err(BinError::Malformed("non-finite entry".into()));
        }
        if self.boundaries.windows(2).any(|w| w[1] < w[0]) {
            return Err(BinError::Malformed("boundaries must be non-decreasing".into()));
        }
        Ok(())
    }

    pub fn min(&self) -> f64 {
        self.boundaries[0]
    }

    pub fn max(&self) -> f64 {
        self.boundaries[NUM_BINS]
    }

    /// Closed value interval `[lower, upper]` of bin `label`.
    pub fn interval(&self, label: BinLabel) -> (f64, f64) {
        (self.boundaries[label.index()], self.boundaries[label.index() + 1])
    }
}

/// Maps a value to its bin. Values below the fitting minimum map to 0.0,
/// above the maximum to 9.9.
pub fn to_bin(scale: &BinScale, value: f64) -> Result<BinLabel, BinError> {
    if !value.is_finite() {
        return Err(BinError::NonFinite(value));
    }
    // first bin whose upper boundary is >= value
    let upper = &scale.boundaries[1..];
    let idx = upper.partition_point(|b| *b < value).min(NUM_BINS - 1);
    Ok(BinLabel(idx as u8))
}

pub fn from_bin(scale: &BinScale, label: BinLabel) -> f64 {
    scale.representatives[label.index()]
}
