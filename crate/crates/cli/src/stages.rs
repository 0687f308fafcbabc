//! Pipeline stages. Each reads the files written by earlier stages, writes
//! its own outputs and a manifest, and is skipped when the manifest shows
//! nothing changed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use svllm_core::baselines::{gbrt_fit, gbrt_predict, import_external_predictions, knn_predict};
use svllm_core::bias::{bias_correlation_table, poi_counts, BiasRecord, CategoryMapping};
use svllm_core::binning::{fit_bin_scale_with_min, to_bin};
use svllm_core::evaluation::{
    ablation_grid, city_model_metrics, evaluate_run, run_ablations, task_model_r2, AblationConfig, AblationRun,
    AblationSample, MetricsReport, PredictionRecord, ScaleSet, Space,
};
use svllm_core::geo::GeoPoint;
use svllm_core::prompt::{
    predict_sample, Gateway, ModelProvider, PredictError, PredictOptions, Preset, TranscriptEntry, TruthMap,
    TEMPLATE_VERSION,
};
use svllm_core::retrieval::transport::{
    FixtureStore, HttpTransport, OfflineTransport, RecordReplayTransport, Transport, TransportMode,
};
use svllm_core::retrieval::{GeoContext, ImageStatus, Retriever};
use svllm_core::seed::sha256_hex;
use svllm_core::{farthest_first_order, split_dataset, BinLabel, IndicatorTask, SplitTag};

use crate::config::Pipeline;
use crate::error::CliError;
use crate::io::{read_json, read_jsonl, write_bytes, write_json, write_jsonl, Manifest};
use crate::synth::{self, PoiExpected, SynthOutputs, TruthRow};

pub const SAMPLES_SCHEMA: &str = "svllm.samples";
pub const DATASET_SCHEMA: &str = "svllm.dataset";
pub const FAILURES_SCHEMA: &str = "svllm.retrieve_failures";
pub const PREDICTIONS_SCHEMA: &str = "svllm.predictions";
pub const TRANSCRIPTS_SCHEMA: &str = "svllm.transcripts";
pub const BIAS_SCHEMA: &str = "svllm.bias_records";

pub const KNN_MODEL: &str = "KNN";
pub const GBRT_MODEL: &str = "GBRT";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub value: f64,
    pub bin: BinLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub point: GeoPoint,
    pub split: SplitTag,
    /// Position in the farthest-first order.
    pub rank: usize,
    pub min_dist_m: f64,
    pub truths: BTreeMap<IndicatorTask, TruthEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub providers: Vec<String>,
    pub retrieved_at: String,
    pub mode: TransportMode,
    pub template_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub sample_id: String,
    pub city: String,
    pub point: GeoPoint,
    pub split: SplitTag,
    pub truths: BTreeMap<IndicatorTask, TruthEntry>,
    pub context: GeoContext,
    pub context_digest: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveFailure {
    pub sample_id: String,
    pub error: String,
}

/// Digest of the model-visible parts of a context: address text, nearby
/// places and image identity. Retrieval timestamps are excluded.
pub fn context_digest(ctx: &GeoContext) -> String {
    let v = json!({
        "point": [ctx.point.lat(), ctx.point.lon()],
        "address": ctx.address.display_name,
        "nearby": ctx.nearby.iter().map(|n| json!([n.name, n.distance_m])).collect::<Vec<_>>(),
        "image": [ctx.image.status, ctx.image.content_hash],
    });
    sha256_hex(v.to_string())
}

pub type Counts = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub skipped: bool,
    pub counts: Counts,
}

impl StageReport {
    pub fn count(&self, key: &str) -> Option<u64> {
        self.counts.get(key).and_then(Value::as_u64)
    }
}

fn set(c: &mut Counts, key: &str, v: impl Into<Value>) {
    c.insert(key.to_string(), v.into());
}

/// Runs `body` unless the stage manifest is current. A manifest is written
/// after failures too, marked incomplete, so later runs can resume.
fn staged<F>(p: &Pipeline, stage: &str, inputs: &[PathBuf], outputs: &[PathBuf], body: F) -> Result<StageReport, CliError>
where
    F: FnOnce(&mut Counts) -> Result<(), CliError>,
{
    let mpath = p.manifest_path(stage);
    if let Ok(m) = read_json::<Manifest>(&mpath, stage) {
        if m.is_current(&p.config_hash, &p.root, inputs, outputs) && m.counts.get("complete") != Some(&Value::Bool(false))
        {
            log::info!("{stage}: up to date, skipping");
            return Ok(StageReport { stage: stage.into(), skipped: true, counts: m.counts });
        }
    }
    let mut counts = Counts::new();
    let result = body(&mut counts);
    set(&mut counts, "complete", result.is_ok());
    let m = Manifest::build(stage, &p.config_hash, p.cfg.seed, &p.root, inputs, outputs, counts.clone());
    write_json(&mpath, &m)?;
    result?;
    log::info!("{stage}: done {}", serde_json::to_string(&counts).unwrap_or_default());
    Ok(StageReport { stage: stage.into(), skipped: false, counts })
}

/// Same config hash as an earlier, possibly incomplete, run of `stage`.
fn resumable(p: &Pipeline, stage: &str) -> bool {
    read_json::<Manifest>(&p.manifest_path(stage), stage).map(|m| m.config_hash == p.config_hash).unwrap_or(false)
}

fn network(p: &Pipeline) -> Result<Arc<dyn Transport>, CliError> {
    let r = &p.cfg.retrieval;
    Ok(match r.mode {
        TransportMode::Replay => Arc::new(OfflineTransport),
        TransportMode::Live | TransportMode::Record => Arc::new(
            HttpTransport::new(Duration::from_secs(r.timeout_s), &r.user_agent)
                .map_err(|e| CliError::Config(e.to_string()))?,
        ),
    })
}

pub fn retriever(p: &Pipeline) -> Result<Retriever, CliError> {
    Ok(Retriever::new(p.cfg.retrieval.clone(), network(p)?)?)
}

fn truth_map(records: &[DatasetRecord]) -> TruthMap {
    let mut t = TruthMap::new();
    for r in records {
        for (task, e) in &r.truths {
            t.insert(r.sample_id.clone(), *task, e.bin);
        }
    }
    t
}

fn gateway(p: &Pipeline, records: &[DatasetRecord]) -> Result<Gateway, CliError> {
    let m = &p.cfg.model;
    let (truth, transport) = match m.provider {
        ModelProvider::RemoteChat => {
            let net = network(p)?;
            let store = FixtureStore::new(p.cfg.paths.fixtures_dir.join("llm"));
            let t: Arc<dyn Transport> = Arc::new(RecordReplayTransport::new(p.cfg.retrieval.mode, net, store));
            (None, Some(t))
        }
        _ => (Some(truth_map(records)), None),
    };
    Ok(Gateway::from_config(m, truth, transport, &p.cfg.paths.cache_dir)?)
}

fn scales_path(p: &Pipeline) -> PathBuf {
    p.results("scales.json")
}

fn dataset_path(p: &Pipeline) -> PathBuf {
    p.results("dataset.jsonl")
}

fn read_dataset(p: &Pipeline) -> Result<Vec<DatasetRecord>, CliError> {
    read_jsonl(&dataset_path(p), DATASET_SCHEMA, "retrieve")
}

fn test_split(records: &[DatasetRecord]) -> Result<Vec<&DatasetRecord>, CliError> {
    let test: Vec<&DatasetRecord> = records.iter().filter(|r| r.split == SplitTag::Test).collect();
    if test.is_empty() {
        return Err(CliError::Data("dataset has no test-split samples".into()));
    }
    Ok(test)
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().map_err(|e| CliError::Config(e.to_string()))
}

// ---------------------------------------------------------------- synth

pub fn synth(p: &Pipeline) -> Result<StageReport, CliError> {
    let spec = p.cfg.synth.clone().ok_or_else(|| CliError::Config("config has no [synth] section".into()))?;
    let outputs = [p.points_path(), p.truth_path(), p.poi_expected_path(), p.cfg.paths.fixtures_dir.clone()];
    staged(p, "synth", &[], &outputs, |c| {
        let s = synth::generate(
            &spec,
            &p.cfg.city,
            p.cfg.bbox_or_default(),
            &p.cfg.tasks,
            p.cfg.seed,
            &p.cfg.retrieval,
            &SynthOutputs {
                points: &outputs[0],
                truth: &outputs[1],
                poi_expected: &outputs[2],
                fixtures_dir: &outputs[3],
            },
        )?;
        set(c, "points", s.points);
        set(c, "fixtures", s.fixtures);
        set(c, "svi_direct", s.svi_direct);
        set(c, "svi_jittered", s.svi_jittered);
        set(c, "svi_missing", s.svi_missing);
        Ok(())
    })
}

pub fn read_poi_expected(p: &Pipeline) -> Result<Vec<PoiExpected>, CliError> {
    read_jsonl(&p.poi_expected_path(), synth::POI_SCHEMA, "synth")
}

// ---------------------------------------------------------------- sample

pub fn sample(p: &Pipeline) -> Result<StageReport, CliError> {
    let inputs = [p.points_path(), p.truth_path()];
    let outputs = [p.results("samples.jsonl"), scales_path(p)];
    staged(p, "sample", &inputs, &outputs, |c| {
        let mut points: Vec<GeoPoint> = read_jsonl(&inputs[0], synth::POINTS_SCHEMA, "synth")?;
        let truth: Vec<TruthRow> = read_jsonl(&inputs[1], synth::TRUTH_SCHEMA, "synth")?;
        if let Some(b) = &p.cfg.bbox {
            points.retain(|pt| b.contains(pt));
        }
        let truth: HashMap<&str, &TruthRow> = truth.iter().map(|t| (t.sample_id.as_str(), t)).collect();
        for pt in &points {
            let row = truth.get(pt.id.as_str()).ok_or_else(|| CliError::Data(format!("no truth row for {}", pt.id)))?;
            if let Some(t) = p.cfg.tasks.iter().find(|t| !row.values.contains_key(t)) {
                return Err(CliError::Data(format!("truth row {} lacks task {t}", pt.id)));
            }
        }
        let order = farthest_first_order(&points).map_err(CliError::data)?;
        let n = match p.cfg.sample.n_samples {
            0 => order.ids.len(),
            n => n.min(order.ids.len()),
        };
        let ids = &order.ids[..n];
        let split = split_dataset(ids, &p.cfg.split).map_err(|e| CliError::Config(e.to_string()))?;

        let mut scales = ScaleSet::default();
        for &task in &p.cfg.tasks {
            let values: Vec<f64> = split.train.iter().map(|id| truth[id.as_str()].values[&task]).collect();
            let scale = fit_bin_scale_with_min(&values, task, p.cfg.sample.min_fit_values)
                .map_err(|e| CliError::Data(format!("fitting the {task} scale: {e}")))?;
            scales.insert(p.cfg.city.clone(), scale);
        }

        let by_id: HashMap<&str, &GeoPoint> = points.iter().map(|pt| (pt.id.as_str(), pt)).collect();
        let tags: HashMap<&str, SplitTag> = [(SplitTag::Train, &split.train), (SplitTag::Val, &split.val), (SplitTag::Test, &split.test)]
            .into_iter()
            .flat_map(|(tag, ids)| ids.iter().map(move |id| (id.as_str(), tag)))
            .collect();
        let mut records = Vec::with_capacity(n);
        for (rank, id) in ids.iter().enumerate() {
            let mut truths = BTreeMap::new();
            for &task in &p.cfg.tasks {
                let value = truth[id.as_str()].values[&task];
                let scale = scales.get(&p.cfg.city, task).expect("fitted above");
                truths.insert(task, TruthEntry { value, bin: to_bin(scale, value).map_err(CliError::data)? });
            }
            records.push(SampleRecord {
                sample_id: id.clone(),
                point: by_id[id.as_str()].clone(),
                split: tags[id.as_str()],
                rank,
                min_dist_m: order.min_dist_m[rank],
                truths,
            });
        }
        write_jsonl(&outputs[0], SAMPLES_SCHEMA, &records)?;
        write_json(&outputs[1], &scales)?;
        set(c, "samples", n);
        set(c, "train", split.train.len());
        set(c, "val", split.val.len());
        set(c, "test", split.test.len());
        Ok(())
    })
}

// ---------------------------------------------------------------- retrieve

pub fn retrieve(p: &Pipeline) -> Result<StageReport, CliError> {
    let mut inputs = vec![p.results("samples.jsonl")];
    if p.cfg.retrieval.mode != TransportMode::Live {
        inputs.push(p.cfg.paths.fixtures_dir.clone());
    }
    let outputs = [dataset_path(p), p.results("retrieve_failures.jsonl")];
    staged(p, "retrieve", &inputs, &outputs, |c| {
        let samples: Vec<SampleRecord> = read_jsonl(&inputs[0], SAMPLES_SCHEMA, "sample")?;
        let retriever = retriever(p)?;
        // completed records are kept when their sample is unchanged
        let previous: HashMap<String, DatasetRecord> = if outputs[0].exists() {
            read_dataset(p).map(|v| v.into_iter().map(|r| (r.sample_id.clone(), r)).collect()).unwrap_or_default()
        } else {
            HashMap::new()
        };
        let reusable = |s: &SampleRecord| {
            previous
                .get(&s.sample_id)
                .filter(|r| r.point == s.point && r.split == s.split && r.truths == s.truths && r.city == p.cfg.city)
                .cloned()
        };
        let todo: Vec<GeoPoint> = samples.iter().filter(|s| reusable(s).is_none()).map(|s| s.point.clone()).collect();
        let mut fresh: HashMap<String, Result<GeoContext, String>> = HashMap::new();
        let mut first_err = None;
        for (pt, res) in todo.iter().zip(retriever.build_many(&todo)) {
            let res = res.map_err(|e| {
                log::warn!("retrieve {}: {e}", pt.id);
                let msg = e.to_string();
                first_err.get_or_insert(e);
                msg
            });
            fresh.insert(pt.id.clone(), res);
        }

        let mut records = Vec::with_capacity(samples.len());
        let mut failures = Vec::new();
        let mut reused = 0usize;
        for s in &samples {
            if let Some(r) = reusable(s) {
                reused += 1;
                records.push(r);
                continue;
            }
            match fresh.remove(&s.sample_id).expect("every pending sample was retrieved") {
                Ok(context) => records.push(DatasetRecord {
                    sample_id: s.sample_id.clone(),
                    city: p.cfg.city.clone(),
                    point: s.point.clone(),
                    split: s.split,
                    truths: s.truths.clone(),
                    context_digest: context_digest(&context),
                    provenance: Provenance {
                        providers: vec![
                            context.address.provider.clone(),
                            svllm_core::retrieval::overpass::PROVIDER.into(),
                            svllm_core::retrieval::streetview::PROVIDER.into(),
                        ],
                        retrieved_at: context.address.retrieved_at.to_rfc3339(),
                        mode: p.cfg.retrieval.mode,
                        template_version: TEMPLATE_VERSION.into(),
                    },
                    context,
                }),
                Err(error) => failures.push(RetrieveFailure { sample_id: s.sample_id.clone(), error }),
            }
        }
        write_jsonl(&outputs[0], DATASET_SCHEMA, &records)?;
        write_jsonl(&outputs[1], FAILURES_SCHEMA, &failures)?;
        let missing = records.iter().filter(|r| r.context.image.status == ImageStatus::Missing).count();
        set(c, "records", records.len());
        set(c, "reused", reused);
        set(c, "failures", failures.len());
        set(c, "images_missing", missing);
        set(c, "provider_requests", retriever.provider_requests());
        set(c, "network_calls", retriever.network_calls());
        match first_err {
            Some(e) if records.is_empty() => Err(e.into()),
            _ => Ok(()),
        }
    })
}

// ---------------------------------------------------------------- predict

fn record_from(
    p: &Pipeline,
    r: &DatasetRecord,
    task: IndicatorTask,
    preset: Option<Preset>,
    model: &str,
    predicted_bin: f64,
) -> PredictionRecord {
    let t = r.truths[&task];
    let mut rec = PredictionRecord::new(r.sample_id.clone(), p.cfg.city.clone(), task, model, t.value, t.bin, predicted_bin);
    rec.preset = preset;
    rec.context_digest = Some(r.context_digest.clone());
    rec
}

pub fn predict(p: &Pipeline) -> Result<StageReport, CliError> {
    let preset = p.cfg.predict_preset()?;
    let stage = format!("predict-{}", preset.cli_name());
    let inputs = [dataset_path(p), scales_path(p)];
    let outputs = [p.predictions_path(preset), p.transcripts_path(preset)];
    let resume = resumable(p, &stage);
    staged(p, &stage, &inputs, &outputs, |c| {
        let data = read_dataset(p)?;
        let scales: ScaleSet = read_json(&inputs[1], "sample")?;
        let test = test_split(&data)?;
        let gw = gateway(p, &data)?;
        let label = p.cfg.predict.model_label.as_str();

        let mut done: HashMap<(String, IndicatorTask), PredictionRecord> = HashMap::new();
        let mut old_transcripts: Vec<TranscriptEntry> = Vec::new();
        if resume && outputs[0].exists() && outputs[1].exists() {
            let old: Vec<PredictionRecord> = read_jsonl(&outputs[0], PREDICTIONS_SCHEMA, "predict")?;
            done = old.into_iter().map(|r| ((r.sample_id.clone(), r.task), r)).collect();
            old_transcripts = read_jsonl(&outputs[1], TRANSCRIPTS_SCHEMA, "predict")?;
        }

        let opts = PredictOptions { answer_stage_images: p.cfg.predict.answer_stage_images };
        let mut jobs = Vec::new();
        let mut records: Vec<Option<PredictionRecord>> = Vec::new();
        for &task in &p.cfg.tasks {
            let scale =
                scales.get(&p.cfg.city, task).ok_or_else(|| CliError::Data(format!("scales.json has no {task} scale")))?;
            for r in &test {
                let prev = done
                    .remove(&(r.sample_id.clone(), task))
                    .filter(|x| x.context_digest.as_deref() == Some(r.context_digest.as_str()) && x.model == label);
                if prev.is_none() {
                    jobs.push((records.len(), *r, task, scale));
                }
                records.push(prev);
            }
        }
        let reused = records.iter().flatten().count();
        let keep: HashSet<(String, IndicatorTask)> =
            records.iter().flatten().map(|r| (r.sample_id.clone(), r.task)).collect();
        let mut transcripts: Vec<TranscriptEntry> =
            old_transcripts.into_iter().filter(|t| keep.contains(&(t.sample_id.clone(), t.task))).collect();

        let results: Vec<_> = thread_pool(p.cfg.predict.workers)?.install(|| {
            jobs.par_iter()
                .map(|&(slot, r, task, scale)| {
                    predict_sample(&r.context, task, scale, preset.flags(), &gw, opts).map(|f| (slot, r, f))
                })
                .collect()
        });
        let mut first_err: Option<PredictError> = None;
        let mut failed = 0usize;
        for res in results {
            match res {
                Ok((slot, r, f)) => {
                    let mut rec = record_from(p, r, f.task, Some(preset), label, f.label.value());
                    rec.rationale = (!f.rationale.is_empty()).then(|| f.rationale.text.clone());
                    rec.answer_text = Some(f.answer_text);
                    rec.prompt_hashes = f.prompt_hashes;
                    rec.template_version = Some(f.template_version);
                    records[slot] = Some(rec);
                    transcripts.extend(f.transcript);
                }
                Err(e) => {
                    log::warn!("predict: {e}");
                    failed += 1;
                    first_err.get_or_insert(e);
                }
            }
        }
        let records: Vec<PredictionRecord> = records.into_iter().flatten().collect();
        write_jsonl(&outputs[0], PREDICTIONS_SCHEMA, &records)?;
        write_jsonl(&outputs[1], TRANSCRIPTS_SCHEMA, &transcripts)?;
        set(c, "records", records.len());
        set(c, "reused", reused);
        set(c, "failed", failed);
        set(c, "gateway_calls", gw.calls());
        match first_err {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    })
}

// ---------------------------------------------------------------- baseline

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KnnModelFile {
    task: IndicatorTask,
    space: Space,
    config: svllm_core::baselines::KnnConfig,
    train: Vec<(GeoPoint, f64)>,
}

pub fn baseline(p: &Pipeline) -> Result<StageReport, CliError> {
    let inputs = [dataset_path(p), scales_path(p)];
    let models_dir = p.results("models");
    let outputs = [p.results("predictions_baselines.jsonl"), models_dir.clone()];
    staged(p, "baseline", &inputs, &outputs, |c| {
        let data = read_dataset(p)?;
        let scales: ScaleSet = read_json(&inputs[1], "sample")?;
        let test = test_split(&data)?;
        let train: Vec<&DatasetRecord> = data.iter().filter(|r| r.split == SplitTag::Train).collect();
        let b = &p.cfg.baselines;
        let mut records = Vec::new();
        for &task in &p.cfg.tasks {
            let scale =
                scales.get(&p.cfg.city, task).ok_or_else(|| CliError::Data(format!("scales.json has no {task} scale")))?;
            let target = |r: &DatasetRecord| match b.space {
                Space::Bin => r.truths[&task].bin.value(),
                Space::Unit => r.truths[&task].value,
            };
            let finish = |r: &DatasetRecord, model: &str, y: f64| -> Result<PredictionRecord, CliError> {
                Ok(match b.space {
                    Space::Bin => record_from(p, r, task, None, model, y),
                    Space::Unit => {
                        let bin = to_bin(scale, y).map_err(CliError::data)?.value();
                        let mut rec = record_from(p, r, task, None, model, bin);
                        rec.predicted_value = Some(y);
                        rec
                    }
                })
            };

            let pairs: Vec<(GeoPoint, f64)> = train.iter().map(|r| (r.point.clone(), target(r))).collect();
            for r in &test {
                let y = knn_predict(&pairs, &r.point, &b.knn).map_err(|e| CliError::Data(format!("KNN {task}: {e}")))?;
                records.push(finish(r, KNN_MODEL, y)?);
            }
            let knn_file = KnnModelFile { task, space: b.space, config: b.knn, train: pairs };
            write_json(&models_dir.join(format!("knn_{}.json", task.key())), &knn_file)?;

            let x: Vec<Vec<f64>> = train.iter().map(|r| b.gbrt.row(&r.point)).collect();
            let y: Vec<f64> = train.iter().map(|r| target(r)).collect();
            let model = gbrt_fit(&x, &y, &b.gbrt).map_err(|e| CliError::Data(format!("GBRT {task}: {e}")))?;
            for r in &test {
                records.push(finish(r, GBRT_MODEL, gbrt_predict(&model, &b.gbrt.row(&r.point)))?);
            }
            write_bytes(&models_dir.join(format!("gbrt_{}.json", task.key())), model.to_json().as_bytes())?;
        }
        write_jsonl(&outputs[0], PREDICTIONS_SCHEMA, &records)?;
        set(c, "records", records.len());
        set(c, "train", train.len());
        set(c, "test", test.len());
        Ok(())
    })
}

// ---------------------------------------------------------------- import

pub fn external_path(p: &Pipeline, model: &str) -> PathBuf {
    p.results(&format!("predictions_external_{}.jsonl", synth::slug(model)))
}

pub fn import(p: &Pipeline, file: &Path, model: &str, space: Space) -> Result<StageReport, CliError> {
    if model.trim().is_empty() {
        return Err(CliError::Config("--model must not be empty".into()));
    }
    let inputs = [dataset_path(p), scales_path(p), file.to_path_buf()];
    let outputs = [external_path(p, model)];
    let stage = format!("import-{}", synth::slug(model));
    staged(p, &stage, &inputs, &outputs, |c| {
        let data = read_dataset(p)?;
        let scales: ScaleSet = read_json(&inputs[1], "sample")?;
        let test = test_split(&data)?;
        let ids: HashSet<String> = test.iter().map(|r| r.sample_id.clone()).collect();
        let rows = import_external_predictions(file, &ids).map_err(CliError::data)?;
        let by_id: HashMap<&str, &DatasetRecord> = test.iter().map(|r| (r.sample_id.as_str(), *r)).collect();
        let mut records = Vec::with_capacity(rows.len());
        for row in rows {
            let r = by_id[row.sample_id.as_str()];
            if !r.truths.contains_key(&row.task) {
                return Err(CliError::Data(format!("{}: task {} is not configured", row.sample_id, row.task)));
            }
            let rec = match space {
                Space::Bin => record_from(p, r, row.task, None, model, row.prediction),
                Space::Unit => {
                    let scale = scales
                        .get(&p.cfg.city, row.task)
                        .ok_or_else(|| CliError::Data(format!("scales.json has no {} scale", row.task)))?;
                    let bin = to_bin(scale, row.prediction).map_err(CliError::data)?.value();
                    let mut rec = record_from(p, r, row.task, None, model, bin);
                    rec.predicted_value = Some(row.prediction);
                    rec
                }
            };
            records.push(rec);
        }
        write_jsonl(&outputs[0], PREDICTIONS_SCHEMA, &records)?;
        set(c, "records", records.len());
        Ok(())
    })
}

// ---------------------------------------------------------------- evaluate

fn external_files(p: &Pipeline) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(&p.cfg.paths.results_dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|f| {
            f.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("predictions_external_") && n.ends_with(".jsonl"))
        })
        .collect();
    files.sort();
    files
}

fn model_order(p: &Pipeline, present: &[String]) -> Vec<String> {
    let mut order = vec![p.cfg.predict.model_label.clone(), KNN_MODEL.to_string(), GBRT_MODEL.to_string()];
    let mut rest: Vec<String> = present.iter().filter(|m| !order.contains(m)).cloned().collect();
    rest.sort();
    order.extend(rest);
    order.retain(|m| present.contains(m));
    order
}

pub fn evaluate(p: &Pipeline) -> Result<StageReport, CliError> {
    let preset = p.cfg.predict_preset()?;
    let mut inputs = vec![scales_path(p), p.predictions_path(preset)];
    let baselines = p.results("predictions_baselines.jsonl");
    if baselines.exists() {
        inputs.push(baselines.clone());
    }
    let externals = external_files(p);
    inputs.extend(externals.iter().cloned());
    let includes: Vec<PathBuf> = p.cfg.report.include.iter().map(|d| d.join("metrics.json")).collect();
    inputs.extend(includes.iter().cloned());
    let mut outputs = vec![p.results("metrics.json"), p.results("metrics.csv")];
    for ext in ["csv", "txt"] {
        outputs.push(p.results(&format!("table2.{ext}")));
        for t in &p.cfg.tasks {
            outputs.push(p.results(&format!("tableA1_{}.{ext}", t.key())));
        }
    }
    staged(p, "evaluate", &inputs, &outputs, |c| {
        let scales: ScaleSet = read_json(&inputs[0], "sample")?;
        let mut records: Vec<PredictionRecord> = read_jsonl(&inputs[1], PREDICTIONS_SCHEMA, "predict")?;
        if baselines.exists() {
            records.extend(read_jsonl::<PredictionRecord>(&baselines, PREDICTIONS_SCHEMA, "baseline")?);
        }
        for f in &externals {
            records.extend(read_jsonl::<PredictionRecord>(f, PREDICTIONS_SCHEMA, "import")?);
        }
        let own = evaluate_run(&records, &scales).map_err(CliError::data)?;
        write_json(&p.results("metrics.json"), &own)?;
        write_bytes(&p.results("metrics.csv"), metrics_csv(&own).as_bytes())?;

        let mut merged = own.clone();
        for inc in &includes {
            let other: MetricsReport = read_json(inc, "evaluate")?;
            merged.rows.extend(other.rows.into_iter().filter(|r| r.city != p.cfg.city));
            merged.notes.extend(other.notes);
        }
        let space = p.cfg.report.space;
        let models = model_order(p, &merged.models());
        let t2 = task_model_r2(&merged, space, &models);
        write_bytes(&p.results("table2.csv"), t2.to_csv().as_bytes())?;
        write_bytes(&p.results("table2.txt"), t2.to_text().as_bytes())?;
        for &task in &p.cfg.tasks {
            let a1 = city_model_metrics(&merged, task, space, &models);
            write_bytes(&p.results(&format!("tableA1_{}.csv", task.key())), a1.to_csv().as_bytes())?;
            write_bytes(&p.results(&format!("tableA1_{}.txt", task.key())), a1.to_text().as_bytes())?;
        }
        set(c, "records", records.len());
        set(c, "rows", own.rows.len());
        set(c, "cities", merged.cities().len());
        set(c, "notes", own.notes.len());
        Ok(())
    })
}

fn metrics_csv(report: &MetricsReport) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["city", "task", "model", "space", "mae", "rmse", "r2", "n"]).expect("in-memory write");
    for r in &report.rows {
        w.write_record([
            r.city.clone(),
            r.task.key().to_string(),
            r.model.clone(),
            r.space.to_string(),
            format!("{:.6}", r.mae),
            format!("{:.6}", r.rmse),
            format!("{:.6}", r.r2),
            r.n.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

// ---------------------------------------------------------------- ablate

pub fn ablation_transcripts_path(p: &Pipeline, preset: Preset) -> PathBuf {
    p.results(&format!("ablation_transcripts_{}.jsonl", preset.cli_name()))
}

/// Merges per-city runs into one run per preset, in first-seen order.
pub fn merge_runs(runs: Vec<AblationRun>) -> Vec<AblationRun> {
    let mut merged: Vec<AblationRun> = Vec::new();
    for run in runs {
        match merged.iter_mut().find(|m| m.preset == run.preset) {
            Some(m) => {
                for (city, by_task) in run.r2 {
                    m.r2.entry(city).or_default().extend(by_task);
                }
                m.gateway_calls += run.gateway_calls;
            }
            None => merged.push(AblationRun { records: Vec::new(), transcripts: Vec::new(), ..run }),
        }
    }
    merged
}

fn summary_csv(runs: &[AblationRun], tasks: &[IndicatorTask]) -> String {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header = vec!["City".to_string(), "Preset".to_string()];
    header.extend(tasks.iter().map(|t| t.table_label().to_string()));
    header.push("Gateway Calls".into());
    header.push("Error".into());
    w.write_record(&header).expect("in-memory write");
    let mut rows: Vec<(String, usize, Vec<String>)> = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let cities: Vec<String> = run.r2.keys().cloned().collect();
        let cities = if cities.is_empty() { run.records.first().map(|r| vec![r.city.clone()]).unwrap_or_default() } else { cities };
        for city in cities {
            let mut row = vec![city.clone(), run.preset.name().to_string()];
            for t in tasks {
                row.push(svllm_core::evaluation::tables::fmt4(run.r2.get(&city).and_then(|m| m.get(t)).copied()));
            }
            row.push(run.gateway_calls.to_string());
            row.push(run.error.clone().unwrap_or_default());
            rows.push((city, i, row));
        }
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    for (_, _, row) in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn ablate(p: &Pipeline) -> Result<StageReport, CliError> {
    let presets = p.cfg.ablation_presets()?;
    let mut inputs = vec![dataset_path(p), scales_path(p)];
    let includes: Vec<PathBuf> = p.cfg.report.include.iter().map(|d| d.join("ablation.json")).collect();
    inputs.extend(includes.iter().cloned());
    let mut outputs = vec![
        p.results("ablation.json"),
        p.results("ablation_summary.csv"),
        p.results("table3.csv"),
        p.results("table3.txt"),
    ];
    outputs.extend(presets.iter().map(|&pr| ablation_transcripts_path(p, pr)));
    staged(p, "ablate", &inputs, &outputs, |c| {
        let data = read_dataset(p)?;
        let scales: ScaleSet = read_json(&inputs[1], "sample")?;
        let samples: Vec<AblationSample> = test_split(&data)?
            .into_iter()
            .map(|r| AblationSample {
                city: r.city.clone(),
                context: r.context.clone(),
                truths: r.truths.iter().map(|(t, e)| (*t, (e.value, e.bin))).collect(),
            })
            .collect();
        let cfg = AblationConfig {
            presets: presets.clone(),
            parallel: p.cfg.ablation.parallel,
            predict: PredictOptions { answer_stage_images: p.cfg.predict.answer_stage_images },
            model_name: p.cfg.predict.model_label.clone(),
        };
        let make = |_: Preset| -> Result<Gateway, svllm_core::prompt::GatewayError> {
            gateway(p, &data).map_err(|e| svllm_core::prompt::GatewayError::Config(e.to_string()))
        };
        let mut runs = run_ablations(&samples, &p.cfg.tasks, &scales, &cfg, &make);
        for run in &mut runs {
            write_jsonl(&ablation_transcripts_path(p, run.preset), TRANSCRIPTS_SCHEMA, &run.transcripts)?;
            run.transcripts.clear();
        }
        write_json(&outputs[0], &runs)?;
        let failed: Vec<String> =
            runs.iter().filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.preset))).collect();

        let mut all = runs.clone();
        for inc in &includes {
            let other: Vec<AblationRun> = read_json(inc, "ablate")?;
            all.extend(other.into_iter().map(|mut r| {
                r.r2.remove(&p.cfg.city);
                r
            }));
        }
        let merged = merge_runs(all);
        write_bytes(&outputs[1], summary_csv(&merged, &p.cfg.tasks).as_bytes())?;
        let grid = ablation_grid(&merged, p.cfg.ablation.task);
        write_bytes(&outputs[2], grid.to_csv().as_bytes())?;
        write_bytes(&outputs[3], grid.to_text().as_bytes())?;
        set(c, "presets", runs.len());
        set(c, "failed_presets", failed.len());
        set(c, "gateway_calls", runs.iter().map(|r| r.gateway_calls).sum::<usize>());
        if failed.len() == runs.len() {
            return Err(CliError::Provider(failed.join("; ")));
        }
        Ok(())
    })
}

// ---------------------------------------------------------------- bias

pub fn bias(p: &Pipeline) -> Result<StageReport, CliError> {
    let preset = p.cfg.bias_preset()?;
    let mut inputs = vec![dataset_path(p), p.predictions_path(preset)];
    if p.cfg.retrieval.mode != TransportMode::Live {
        inputs.push(p.cfg.paths.fixtures_dir.clone());
    }
    if let Some(m) = &p.cfg.bias.mapping {
        inputs.push(m.clone());
    }
    let includes: Vec<PathBuf> = p.cfg.report.include.iter().map(|d| d.join("bias_records.jsonl")).collect();
    inputs.extend(includes.iter().cloned());
    let outputs = [p.results("bias_records.jsonl"), p.results("tableA2.csv"), p.results("bias_matrix.csv"), p.results("bias_table.json")];
    staged(p, "bias", &inputs, &outputs, |c| {
        let data = read_dataset(p)?;
        let preds: Vec<PredictionRecord> = read_jsonl(&inputs[1], PREDICTIONS_SCHEMA, "predict")?;
        let mapping = match &p.cfg.bias.mapping {
            Some(path) => CategoryMapping::load(path).map_err(|e| CliError::Config(e.to_string()))?,
            None => CategoryMapping::default(),
        };
        let retriever = retriever(p)?;
        let points: HashMap<&str, &GeoPoint> = data.iter().map(|r| (r.sample_id.as_str(), &r.point)).collect();
        let mut counts_by_id = HashMap::new();
        let mut records = Vec::new();
        for pred in preds.iter().filter(|r| r.model == p.cfg.predict.model_label) {
            let point = points
                .get(pred.sample_id.as_str())
                .ok_or_else(|| CliError::Data(format!("prediction for unknown sample {}", pred.sample_id)))?;
            let counts = match counts_by_id.get(&pred.sample_id) {
                Some(c) => c,
                None => {
                    let c = poi_counts(&retriever, point, p.cfg.bias.radius_m, &mapping).map_err(|e| match e {
                        svllm_core::bias::BiasError::Retrieval(r) => CliError::from(r),
                        other => CliError::data(other),
                    })?;
                    counts_by_id.entry(pred.sample_id.clone()).or_insert(c)
                }
            };
            records.push(BiasRecord::from_prediction(pred, counts.clone()));
        }
        write_jsonl(&outputs[0], BIAS_SCHEMA, &records)?;
        let mut all = records.clone();
        for inc in &includes {
            let other: Vec<BiasRecord> = read_jsonl(inc, BIAS_SCHEMA, "bias")?;
            all.extend(other.into_iter().filter(|r| r.city != p.cfg.city));
        }
        let table = bias_correlation_table(&all);
        write_bytes(&outputs[1], table.to_csv().as_bytes())?;
        write_bytes(&outputs[2], table.matrix_csv().as_bytes())?;
        write_json(&outputs[3], &table)?;
        set(c, "records", records.len());
        set(c, "samples", counts_by_id.len());
        set(c, "correlations", table.all.len());
        set(c, "notes", table.notes.len());
        set(c, "provider_requests", retriever.provider_requests());
        set(c, "network_calls", retriever.network_calls());
        Ok(())
    })
}

// ---------------------------------------------------------------- run

/// Every stage in order; synth only when the config has a `[synth]` section.
pub fn run_all(p: &Pipeline) -> Result<Vec<StageReport>, CliError> {
    let mut out = Vec::new();
    if p.cfg.synth.is_some() {
        out.push(synth(p)?);
    }
    for stage in [sample, retrieve, predict, baseline, evaluate, ablate, bias] {
        out.push(stage(p)?);
    }
    Ok(out)
}
