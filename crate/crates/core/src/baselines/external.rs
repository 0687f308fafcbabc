//! Predictions produced by models outside this crate, supplied as CSV with
//! columns `sample_id,task,prediction`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::IndicatorTask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalPrediction {
    pub sample_id: String,
    pub task: IndicatorTask,
    pub prediction: f64,
}

/// `row` is the 1-based line number in the file (the header is line 1).
#[derive(Debug, Error)]
pub enum ImportError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}: unknown sample id {sample_id:?}")]
    UnknownSampleId { row: usize, sample_id: String },
    #[error("row {row}: {message}")]
    InvalidValue { row: usize, message: String },
}

const COLUMNS: [&str; 3] = ["sample_id", "task", "prediction"];

pub fn import_external_predictions(
    path: &Path,
    known_ids: &HashSet<String>,
) -> Result<Vec<ExternalPrediction>, ImportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ImportError::Io { path: path.display().to_string(), source })?;
    parse_external_predictions(&text, known_ids)
}

pub fn parse_external_predictions(
    text: &str,
    known_ids: &HashSet<String>,
) -> Result<Vec<ExternalPrediction>, ImportError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| ImportError::Schema(e.to_string()))?.clone();
    let mut pos = [0usize; 3];
    for (slot, name) in pos.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ImportError::Schema(format!("missing column {name:?} (have {:?})", headers.iter().collect::<Vec<_>>())))?;
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| ImportError::Schema(format!("row {row}: {e}")))?;
        let field = |k: usize| record.get(pos[k]).unwrap_or("");
        let sample_id = field(0).to_string();
        if !known_ids.contains(&sample_id) {
            return Err(ImportError::UnknownSampleId { row, sample_id });
        }
        let task: IndicatorTask = field(1).parse::<IndicatorTask>().map_err(|e| ImportError::InvalidValue { row, message: e.to_string() })?;
        let prediction: f64 = field(2)
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| ImportError::InvalidValue { row, message: format!("prediction {:?} is not a finite number", field(2)) })?;
        out.push(ExternalPrediction { sample_id, task, prediction });
    }
    Ok(out)
}
