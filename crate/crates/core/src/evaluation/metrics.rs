use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {y} truths vs {y_hat} predictions")]
    LengthMismatch { y: usize, y_hat: usize },
    #[error("no observations")]
    Empty,
    #[error("R² needs at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("ground truth has zero variance")]
    ZeroVariance,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

/// Paired truths and predictions.
#[derive(Debug, Clone, Copy)]
pub struct MetricsInput<'a> {
    pub y: &'a [f64],
    pub y_hat: &'a [f64],
}

impl<'a> MetricsInput<'a> {
    pub fn new(y: &'a [f64], y_hat: &'a [f64]) -> Result<Self, MetricsError> {
        if y.len() != y_hat.len() {
            return Err(MetricsError::LengthMismatch { y: y.len(), y_hat: y_hat.len() });
        }
        if y.is_empty() {
            return Err(MetricsError::Empty);
        }
        if let Some(i) = y.iter().zip(y_hat).position(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(MetricsError::NonFinite(i));
        }
        Ok(Self { y, y_hat })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y_bar(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.n() as f64
    }

    fn residuals(&self) -> impl Iterator<Item = f64> + '_ {
        self.y.iter().zip(self.y_hat).map(|(a, b)| a - b)
    }
}

pub fn mae(m: &MetricsInput) -> f64 {
    m.residuals().map(f64::abs).sum::<f64>() / m.n() as f64
}

pub fn rmse(m: &MetricsInput) -> f64 {
    (m.residuals().map(|e| e * e).sum::<f64>() / m.n() as f64).sqrt()
}

/// Coefficient of determination; negative when the predictions are worse
/// than the mean of `y`.
pub fn r_squared(m: &MetricsInput) -> Result<f64, MetricsError> {
    if m.n() < 2 {
        return Err(MetricsError::TooFew(m.n()));
    }
    let y_bar = m.y_bar();
    let ss_tot: f64 = m.y.iter().map(|v| (v - y_bar) * (v - y_bar)).sum();
    if ss_tot == 0.0 || m.y.iter().all(|v| *v == m.y[0]) {
        return Err(MetricsError::ZeroVariance);
    }
    let ss_res: f64 = m.residuals().map(|e| e * e).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub n: usize,
}

pub fn score(y: &[f64], y_hat: &[f64]) -> Result<Scores, MetricsError> {
    let m = MetricsInput::new(y, y_hat)?;
    Ok(Scores { mae: mae(&m), rmse: rmse(&m), r2: r_squared(&m)?, n: m.n() })
}
