use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::score;
use crate::binning::{from_bin, BinLabel, BinScale};
use crate::prompt::Preset;
use crate::task::IndicatorTask;

/// One prediction for one sample and task, as stored in results files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub city: String,
    pub task: IndicatorTask,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    pub truth_value: f64,
    pub truth_bin: BinLabel,
    /// Prediction on the 0.0–9.9 scale; baselines may be fractional.
    pub predicted_bin: f64,
    /// Prediction in indicator units when the model produced one directly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_hashes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_digest: Option<String>,
}

impl PredictionRecord {
    pub fn new(
        sample_id: impl Into<String>,
        city: impl Into<String>,
        task: IndicatorTask,
        model: impl Into<String>,
        truth_value: f64,
        truth_bin: BinLabel,
        predicted_bin: f64,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            city: city.into(),
            task,
            model: model.into(),
            preset: None,
            truth_value,
            truth_bin,
            predicted_bin,
            predicted_value: None,
            rationale: None,
            answer_text: None,
            prompt_hashes: Vec::new(),
            template_version: None,
            context_digest: None,
        }
    }

    /// Signed bin-scale error, predicted minus actual.
    pub fn bias(&self) -> f64 {
        self.predicted_bin - self.truth_bin.value()
    }
}

/// Fitted scales by city and task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    pub scales: BTreeMap<String, BTreeMap<IndicatorTask, BinScale>>,
}

impl ScaleSet {
    pub fn insert(&mut self, city: impl Into<String>, scale: BinScale) {
        self.scales.entry(city.into()).or_default().insert(scale.task, scale);
    }

    pub fn get(&self, city: &str, task: IndicatorTask) -> Option<&BinScale> {
        self.scales.get(city)?.get(&task)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Bin,
    Unit,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Bin => "bin",
            Space::Unit => "unit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub city: String,
    pub task: IndicatorTask,
    pub model: String,
    pub space: Space,
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    /// Groups that could not be scored, with the reason.
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn row(&self, city: &str, task: IndicatorTask, model: &str, space: Space) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.city == city && r.task == task && r.model == model && r.space == space)
    }

    pub fn cities(&self) -> Vec<String> {
        let mut v: Vec<String> = self.rows.iter().map(|r| r.city.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Models in first-seen order.
    pub fn models(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for r in &self.rows {
            if !v.contains(&r.model) {
                v.push(r.model.clone());
            }
        }
        v
    }

    pub fn tasks(&self) -> Vec<IndicatorTask> {
        let mut v: Vec<IndicatorTask> = self.rows.iter().map(|r| r.task).collect();
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no bin scale for city {city:?} task {task}")]
    MissingScale { city: String, task: IndicatorTask },
}

/// Scores predictions per (city, task, model) in bin space and in
/// indicator units. Unit-space predictions come from `predicted_value` when
/// present, otherwise from the representative value of the nearest bin.
pub fn evaluate_run(records: &[PredictionRecord], scales: &ScaleSet) -> Result<MetricsReport, EvalError> {
    let mut groups: BTreeMap<(String, IndicatorTask, String), Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.city.clone(), r.task, r.model.clone())).or_default().push(r);
    }
    let mut report = MetricsReport::default();
    for ((city, task, model), recs) in groups {
        let scale = scales.get(&city, task).ok_or_else(|| EvalError::MissingScale { city: city.clone(), task })?;
        let bin_y: Vec<f64> = recs.iter().map(|r| r.truth_bin.value()).collect();
        let bin_hat: Vec<f64> = recs.iter().map(|r| r.predicted_bin).collect();
        let unit_y: Vec<f64> = recs.iter().map(|r| r.truth_value).collect();
        let unit_hat: Vec<f64> = recs
            .iter()
            .map(|r| r.predicted_value.unwrap_or_else(|| from_bin(scale, BinLabel::nearest(r.predicted_bin))))
            .collect();
        for (space, y, y_hat) in [(Space::Bin, &bin_y, &bin_hat), (Space::Unit, &unit_y, &unit_hat)] {
            match score(y, y_hat) {
                Ok(s) => report.rows.push(MetricsRow {
                    city: city.clone(),
                    task,
                    model: model.clone(),
                    space,
                    mae: s.mae,
                    rmse: s.rmse,
                    r2: s.r2,
                    n: s.n,
                }),
                Err(e) => {
                    let note = format!("{city}/{task}/{model} ({space}): skipped, {e}");
                    log::warn!("{note}");
                    report.notes.push(note);
                }
            }
        }
    }
    Ok(report)
}
