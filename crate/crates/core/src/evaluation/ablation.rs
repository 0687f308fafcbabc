use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::score;
use super::report::{PredictionRecord, ScaleSet};
use super::tables::Grid;
use crate::binning::BinLabel;
use crate::prompt::{predict_sample, AblationFlags, Gateway, GatewayError, PredictOptions, Preset, TranscriptEntry};
use crate::retrieval::GeoContext;
use crate::task::IndicatorTask;

/// A test-split sample with its retrieved context and ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSample {
    pub city: String,
    pub context: GeoContext,
    pub truths: BTreeMap<IndicatorTask, (f64, BinLabel)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub presets: Vec<Preset>,
    /// Predict samples of one preset concurrently.
    pub parallel: bool,
    pub predict: PredictOptions,
    pub model_name: String,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { presets: Preset::ALL.to_vec(), parallel: false, predict: PredictOptions::default(), model_name: "llm".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub preset: Preset,
    pub flags: AblationFlags,
    /// Bin-space R² by city and task.
    pub r2: BTreeMap<String, BTreeMap<IndicatorTask, f64>>,
    pub gateway_calls: usize,
    pub records: Vec<PredictionRecord>,
    pub transcripts: Vec<TranscriptEntry>,
    /// Set when the preset aborted; other presets still run.
    pub error: Option<String>,
    pub notes: Vec<String>,
}

fn run_preset(
    preset: Preset,
    samples: &[AblationSample],
    tasks: &[IndicatorTask],
    scales: &ScaleSet,
    cfg: &AblationConfig,
    gateway: &Gateway,
) -> Result<(Vec<PredictionRecord>, Vec<TranscriptEntry>), String> {
    let flags = preset.flags();
    let one = |(task, s): (IndicatorTask, &AblationSample)| -> Result<(PredictionRecord, Vec<TranscriptEntry>), String> {
        let scale = scales.get(&s.city, task).ok_or_else(|| format!("no bin scale for city {:?} task {task}", s.city))?;
        let &(truth_value, truth_bin) =
            s.truths.get(&task).ok_or_else(|| format!("sample {} has no truth for {task}", s.context.point.id))?;
        let f = predict_sample(&s.context, task, scale, flags, gateway, cfg.predict).map_err(|e| e.to_string())?;
        let mut rec = PredictionRecord::new(
            f.sample_id.clone(),
            s.city.clone(),
            task,
            cfg.model_name.clone(),
            truth_value,
            truth_bin,
            f.label.value(),
        );
        rec.preset = Some(preset);
        rec.rationale = (!f.rationale.is_empty()).then(|| f.rationale.text.clone());
        rec.answer_text = Some(f.answer_text.clone());
        rec.prompt_hashes = f.prompt_hashes.clone();
        rec.template_version = Some(f.template_version.clone());
        Ok((rec, f.transcript))
    };
    let jobs: Vec<(IndicatorTask, &AblationSample)> =
        tasks.iter().flat_map(|t| samples.iter().map(move |s| (*t, s))).collect();
    let results: Vec<_> =
        if cfg.parallel { jobs.into_par_iter().map(one).collect() } else { jobs.into_iter().map(one).collect() };
    let mut records = Vec::new();
    let mut transcripts = Vec::new();
    for r in results {
        let (rec, t) = r?;
        records.push(rec);
        transcripts.extend(t);
    }
    Ok((records, transcripts))
}

/// Runs every configured preset over `samples`. A failing preset is
/// reported in its own run and does not stop the others.
pub fn run_ablations(
    samples: &[AblationSample],
    tasks: &[IndicatorTask],
    scales: &ScaleSet,
    cfg: &AblationConfig,
    make_gateway: &dyn Fn(Preset) -> Result<Gateway, GatewayError>,
) -> Vec<AblationRun> {
    cfg.presets
        .iter()
        .map(|&preset| {
            let mut run = AblationRun {
                preset,
                flags: preset.flags(),
                r2: BTreeMap::new(),
                gateway_calls: 0,
                records: Vec::new(),
                transcripts: Vec::new(),
                error: None,
                notes: Vec::new(),
            };
            let gateway = match make_gateway(preset) {
                Ok(g) => g,
                Err(e) => {
                    run.error = Some(e.to_string());
                    return run;
                }
            };
            match run_preset(preset, samples, tasks, scales, cfg, &gateway) {
                Ok((records, transcripts)) => {
                    run.records = records;
                    run.transcripts = transcripts;
                }
                Err(e) => {
                    log::warn!("preset {preset} failed: {e}");
                    run.error = Some(e);
                }
            }
            run.gateway_calls = gateway.calls();
            let mut groups: BTreeMap<(String, IndicatorTask), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for r in &run.records {
                let g = groups.entry((r.city.clone(), r.task)).or_default();
                g.0.push(r.truth_bin.value());
                g.1.push(r.predicted_bin);
            }
            for ((city, task), (y, y_hat)) in groups {
                match score(&y, &y_hat) {
                    Ok(s) => {
                        run.r2.entry(city).or_default().insert(task, s.r2);
                    }
                    Err(e) => run.notes.push(format!("{city}/{task}: {e}")),
                }
            }
            run
        })
        .collect()
}

/// City by preset R² for one task.
pub fn ablation_grid(runs: &[AblationRun], task: IndicatorTask) -> Grid {
    let mut cities: Vec<String> = runs.iter().flat_map(|r| r.r2.keys().cloned()).collect();
    cities.sort();
    cities.dedup();
    let mut grid = Grid::new(
        format!("R² by ablation preset ({})", task.table_label()),
        "City",
        cities,
        runs.iter().map(|r| r.preset.name().to_string()).collect(),
    );
    for run in runs {
        for (city, by_task) in &run.r2 {
            if let Some(v) = by_task.get(&task) {
                grid.set(city, run.preset.name(), *v);
            }
        }
    }
    grid
}
