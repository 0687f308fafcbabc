//! Pipeline configuration (TOML), command-line overrides and the resolved
//! artifact layout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use svllm_core::baselines::{GbrtConfig, KnnConfig};
use svllm_core::evaluation::Space;
use svllm_core::geo::BBox;
use svllm_core::prompt::{ModelConfig, Preset};
use svllm_core::retrieval::transport::TransportMode;
use svllm_core::retrieval::RetrievalConfig;
use svllm_core::seed::sha256_hex;
use svllm_core::{IndicatorTask, SplitConfig};

use crate::error::CliError;
use crate::synth::{SynthCitySpec, DEFAULT_BBOX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub fixtures_dir: PathBuf,
    pub results_dir: PathBuf,
    /// Defaults to `<data_dir>/points.jsonl`.
    pub points: Option<PathBuf>,
    /// Defaults to `<data_dir>/truth.jsonl`.
    pub truth: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            cache_dir: "cache".into(),
            fixtures_dir: "fixtures".into(),
            results_dir: "results".into(),
            points: None,
            truth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Leading points of the farthest-first order to keep; 0 keeps all.
    pub n_samples: usize,
    pub min_fit_values: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n_samples: 0, min_fit_values: svllm_core::binning::DEFAULT_MIN_FIT_VALUES }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub preset: String,
    pub answer_stage_images: bool,
    /// Model column name in reports.
    pub model_label: String,
    pub workers: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { preset: "full".into(), answer_stage_images: true, model_label: "llm".into(), workers: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSettings {
    pub knn: KnnConfig,
    pub gbrt: GbrtConfig,
    /// Target the baselines regress on: bin labels or indicator units.
    pub space: Space,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        Self { knn: KnnConfig::default(), gbrt: GbrtConfig::default(), space: Space::Bin }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub presets: Vec<String>,
    /// Task shown in the preset-by-city table.
    pub task: IndicatorTask,
    pub parallel: bool,
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            presets: Preset::ALL.iter().map(|p| p.cli_name().to_string()).collect(),
            task: IndicatorTask::Population,
            parallel: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasSettings {
    pub radius_m: f64,
    /// Replacement tag-to-category mapping (JSON).
    pub mapping: Option<PathBuf>,
    /// Predictions whose errors are analysed.
    pub preset: String,
}

impl Default for BiasSettings {
    fn default() -> Self {
        Self { radius_m: svllm_core::bias::POI_RADIUS_M, mapping: None, preset: "full".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    /// Results directories of other cities merged into the cross-city tables.
    pub include: Vec<PathBuf>,
    /// Space the summary tables are computed in.
    pub space: Space,
}

impl Default for ReportSettings {
    fn default() -> Self {
        Self { include: Vec::new(), space: Space::Bin }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub city: String,
    pub bbox: Option<BBox>,
    pub tasks: Vec<IndicatorTask>,
    pub paths: PathsConfig,
    pub sample: SampleConfig,
    pub split: SplitConfig,
    pub retrieval: RetrievalConfig,
    pub model: ModelConfig,
    pub predict: PredictConfig,
    pub baselines: BaselineSettings,
    pub ablation: AblationSettings,
    pub bias: BiasSettings,
    pub report: ReportSettings,
    pub synth: Option<SynthCitySpec>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            city: "Synthville".into(),
            bbox: None,
            tasks: IndicatorTask::ALL.to_vec(),
            paths: PathsConfig::default(),
            sample: SampleConfig::default(),
            split: SplitConfig::default(),
            retrieval: RetrievalConfig::default(),
            model: ModelConfig::default(),
            predict: PredictConfig::default(),
            baselines: BaselineSettings::default(),
            ablation: AblationSettings::default(),
            bias: BiasSettings::default(),
            report: ReportSettings::default(),
            synth: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<TransportMode>,
    pub preset: Option<Preset>,
}

fn parse_preset(s: &str) -> Result<Preset, CliError> {
    s.parse().map_err(CliError::Config)
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Applies overrides and pushes the global seed into every seeded
    /// component.
    pub fn apply(&mut self, o: Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(mode) = o.mode {
            self.retrieval.mode = mode;
        }
        if let Some(p) = o.preset {
            self.predict.preset = p.cli_name().into();
        }
        self.split.seed = self.seed;
        self.retrieval.seed = self.seed;
        self.model.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.city.trim().is_empty() {
            return bad("city must not be empty".into());
        }
        if self.tasks.is_empty() {
            return bad("tasks must not be empty".into());
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return bad(format!("task {t} listed twice"));
            }
        }
        if let Some(b) = &self.bbox {
            b.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        self.split.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.baselines.gbrt.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.baselines.knn.k == 0 {
            return bad("baselines.knn.k must be >= 1".into());
        }
        self.predict_preset()?;
        self.bias_preset()?;
        self.ablation_presets()?;
        if !(self.bias.radius_m > 0.0 && self.bias.radius_m.is_finite()) {
            return bad(format!("bias.radius_m must be positive, got {}", self.bias.radius_m));
        }
        if self.predict.model_label.trim().is_empty() {
            return bad("predict.model_label must not be empty".into());
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }

    pub fn predict_preset(&self) -> Result<Preset, CliError> {
        parse_preset(&self.predict.preset)
    }

    pub fn bias_preset(&self) -> Result<Preset, CliError> {
        parse_preset(&self.bias.preset)
    }

    pub fn ablation_presets(&self) -> Result<Vec<Preset>, CliError> {
        let presets = self.ablation.presets.iter().map(|s| parse_preset(s)).collect::<Result<Vec<_>, _>>()?;
        if presets.is_empty() {
            return Err(CliError::Config("ablation.presets must not be empty".into()));
        }
        Ok(presets)
    }

    pub fn bbox_or_default(&self) -> BBox {
        self.synth.as_ref().and_then(|s| s.bbox).or(self.bbox).unwrap_or(DEFAULT_BBOX)
    }

    /// Digest of the effective configuration, before paths are resolved.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_vec(self).expect("config serializes"))
    }
}

/// A loaded configuration with paths resolved against the config file's
/// directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub config_hash: String,
    pub root: PathBuf,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Pipeline {
    pub fn load(path: &Path, overrides: Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_parts(PipelineConfig::from_toml(&text)?, base, overrides)
    }

    pub fn from_parts(mut cfg: PipelineConfig, base: &Path, overrides: Overrides) -> Result<Self, CliError> {
        cfg.apply(overrides);
        cfg.validate()?;
        let config_hash = cfg.hash();
        let p = &mut cfg.paths;
        for dir in [&mut p.data_dir, &mut p.cache_dir, &mut p.fixtures_dir, &mut p.results_dir] {
            *dir = resolve(base, dir);
        }
        for file in [&mut p.points, &mut p.truth].into_iter().flatten() {
            *file = resolve(base, file);
        }
        if let Some(m) = &mut cfg.bias.mapping {
            *m = resolve(base, m);
        }
        if let Some(s) = &mut cfg.model.script_path {
            *s = resolve(base, s);
        }
        for inc in &mut cfg.report.include {
            *inc = resolve(base, inc);
        }
        cfg.retrieval.cache_dir = cfg.paths.cache_dir.clone();
        cfg.retrieval.fixtures_dir = cfg.paths.fixtures_dir.clone();
        cfg.retrieval.validate()?;
        Ok(Self { cfg, config_hash, root: base.to_path_buf() })
    }

    pub fn points_path(&self) -> PathBuf {
        self.cfg.paths.points.clone().unwrap_or_else(|| self.cfg.paths.data_dir.join("points.jsonl"))
    }

    pub fn truth_path(&self) -> PathBuf {
        self.cfg.paths.truth.clone().unwrap_or_else(|| self.cfg.paths.data_dir.join("truth.jsonl"))
    }

    pub fn poi_expected_path(&self) -> PathBuf {
        self.cfg.paths.data_dir.join("poi_expected.jsonl")
    }

    pub fn results(&self, name: &str) -> PathBuf {
        self.cfg.paths.results_dir.join(name)
    }

    pub fn manifest_path(&self, stage: &str) -> PathBuf {
        self.cfg.paths.results_dir.join("manifests").join(format!("{stage}.json"))
    }

    pub fn predictions_path(&self, preset: Preset) -> PathBuf {
        self.results(&format!("predictions_{}.jsonl", preset.cli_name()))
    }

    pub fn transcripts_path(&self, preset: Preset) -> PathBuf {
        self.results(&format!("transcripts_{}.jsonl", preset.cli_name()))
    }
}
