//! Chat-completion gateway: deterministic mocks for offline runs and an
//! OpenAI-style remote adapter, behind one retrying, rate-limited front.

use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::{PromptBundle, Stage};
use crate::binning::BinLabel;
use crate::retrieval::transport::{HttpRequest, RateLimiter, Transport, TransportError};
use crate::seed::{derive_seed, rng_for, sha256_hex};
use crate::task::IndicatorTask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelProvider {
    RemoteChat,
    /// Answers with the true bin from an injected truth map.
    #[default]
    MockEcho,
    /// True bin plus seeded Gaussian noise.
    MockNoisy,
    /// Replays a fixed list of responses in order.
    MockScripted,
    /// Answer derived from a digest of the prompt.
    MockHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub provider: ModelProvider,
    /// Chat-completions URL for `remote_chat`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub timeout_s: u64,
    pub backoff_ms: u64,
    pub rate_limit_rps: f64,
    /// Concurrent requests allowed through the gateway; 0 = unbounded.
    pub max_in_flight: usize,
    pub noise_sigma: f64,
    /// Added to `noise_sigma` for every disabled ablation component.
    pub noise_penalty: f64,
    pub seed: u64,
    /// Responses for `mock_scripted`, consumed in order.
    pub script: Vec<String>,
    /// Optional JSON file with a list of scripted responses.
    pub script_path: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            provider: ModelProvider::MockEcho,
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: "SVLLM_LLM_API_KEY".into(),
            temperature: 0.0,
            max_retries: 3,
            timeout_s: 60,
            backoff_ms: 1000,
            rate_limit_rps: 2.0,
            max_in_flight: 4,
            noise_sigma: 0.5,
            noise_penalty: 0.0,
            seed: 0,
            script: Vec::new(),
            script_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("gateway failed after {attempts} attempts: {message}")]
    Exhausted { attempts: u32, message: String },
    #[error("gateway timed out after {attempts} attempts: {message}")]
    Timeout { attempts: u32, message: String },
    #[error("model rejected the request (HTTP {status}): {message}")]
    Rejected { status: u16, message: String },
    #[error("no truth value for sample {sample_id:?} task {task}")]
    MissingTruth { sample_id: String, task: IndicatorTask },
    #[error("scripted responses exhausted")]
    ScriptExhausted,
    #[error("malformed model response: {0}")]
    Malformed(String),
    #[error("gateway configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub attempts: u32,
}

/// True bin labels keyed by sample id and task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TruthMap {
    labels: HashMap<String, HashMap<IndicatorTask, BinLabel>>,
}

impl TruthMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, sample_id: impl Into<String>, task: IndicatorTask, label: BinLabel) {
        self.labels.entry(sample_id.into()).or_default().insert(task, label);
    }

    pub fn get(&self, sample_id: &str, task: IndicatorTask) -> Option<BinLabel> {
        self.labels.get(sample_id)?.get(&task).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A scripted step: a reply, or a failure to inject.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptStep {
    Reply(String),
    TransientFailure(String),
    Timeout(String),
}

enum AttemptError {
    Transient(String),
    Timeout(String),
    Fatal(GatewayError),
}

struct InFlight {
    cap: usize,
    count: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(cap: usize) -> Self {
        Self { cap, count: Mutex::new(0), freed: Condvar::new() }
    }

    fn enter(&self) -> Option<InFlightGuard<'_>> {
        if self.cap == 0 {
            return None;
        }
        let mut n = self.count.lock().expect("in-flight lock");
        while *n >= self.cap {
            n = self.freed.wait(n).expect("in-flight lock");
        }
        *n += 1;
        Some(InFlightGuard(self))
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.count.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

struct RemoteChat {
    transport: Arc<dyn Transport>,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    temperature: f64,
    image_root: PathBuf,
    limiter: RateLimiter,
}

enum Backend {
    Echo { truth: TruthMap },
    Noisy { truth: TruthMap, sigma: f64, penalty: f64, seed: u64 },
    Hash { seed: u64 },
    Scripted { steps: Mutex<VecDeque<ScriptStep>> },
    Remote(Box<RemoteChat>),
}

pub struct Gateway {
    backend: Backend,
    max_retries: u32,
    backoff: Duration,
    calls: AtomicUsize,
    in_flight: InFlight,
    id: String,
}

fn mock_rationale(bundle: &PromptBundle) -> String {
    let lines = bundle.user_text.lines().filter(|l| l.starts_with("- ") || l.starts_with("  ")).count();
    format!(
        "Step 1: the coordinates place the site inside the study area. \
         Step 2: {} context lines and {} image(s) were reviewed for factors affecting {}. \
         Step 3: the surrounding land use and density are the dominant factors.",
        lines,
        bundle.image_attachments.len(),
        bundle.task.indicator_name()
    )
}

/// `clamp(round₁(true + ε))` with ε drawn from `N(0, σ)` seeded by
/// `(seed, sample id, task)`.
pub fn noisy_label(truth: BinLabel, sigma: f64, seed: u64, sample_id: &str, task: IndicatorTask) -> BinLabel {
    if sigma <= 0.0 {
        return truth;
    }
    let mut rng = rng_for(seed, &["mock-noisy", sample_id, task.key()]);
    let eps = Normal::new(0.0, sigma).expect("positive sigma").sample(&mut rng);
    BinLabel::nearest(truth.value() + eps)
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

impl Gateway {
    pub fn mock_echo(truth: TruthMap) -> Self {
        Self::with_backend(Backend::Echo { truth }, "mock-echo", 0, 0, 0)
    }

    pub fn mock_noisy(truth: TruthMap, sigma: f64, penalty: f64, seed: u64) -> Self {
        Self::with_backend(Backend::Noisy { truth, sigma, penalty, seed }, "mock-noisy", 0, 0, 0)
    }

    pub fn mock_hash(seed: u64) -> Self {
        Self::with_backend(Backend::Hash { seed }, "mock-hash", 0, 0, 0)
    }

    pub fn mock_scripted(steps: Vec<ScriptStep>, max_retries: u32) -> Self {
        Self::with_backend(Backend::Scripted { steps: Mutex::new(steps.into()) }, "mock-scripted", max_retries, 0, 0)
    }

    pub fn remote(cfg: &ModelConfig, transport: Arc<dyn Transport>, image_root: impl Into<PathBuf>) -> Self {
        let remote = RemoteChat {
            transport,
            endpoint: cfg.endpoint.clone(),
            model: cfg.model.clone(),
            api_key: std::env::var(&cfg.api_key_env).ok(),
            temperature: cfg.temperature,
            image_root: image_root.into(),
            limiter: RateLimiter::new(cfg.rate_limit_rps),
        };
        Self::with_backend(Backend::Remote(Box::new(remote)), &cfg.model, cfg.max_retries, cfg.backoff_ms, cfg.max_in_flight)
    }

    /// Builds the gateway named by `cfg.provider`. Mocks that answer from
    /// ground truth need `truth`; the remote adapter needs `transport`.
    pub fn from_config(
        cfg: &ModelConfig,
        truth: Option<TruthMap>,
        transport: Option<Arc<dyn Transport>>,
        image_root: impl Into<PathBuf>,
    ) -> Result<Self, GatewayError> {
        let need_truth = || truth.clone().ok_or_else(|| GatewayError::Config("this mock provider needs a truth map".into()));
        Ok(match cfg.provider {
            ModelProvider::MockEcho => Self::mock_echo(need_truth()?),
            ModelProvider::MockNoisy => {
                if !(cfg.noise_sigma.is_finite() && cfg.noise_sigma >= 0.0) {
                    return Err(GatewayError::Config(format!("noise_sigma must be >= 0, got {}", cfg.noise_sigma)));
                }
                Self::mock_noisy(need_truth()?, cfg.noise_sigma, cfg.noise_penalty, cfg.seed)
            }
            ModelProvider::MockHash => Self::mock_hash(cfg.seed),
            ModelProvider::MockScripted => {
                let mut replies = cfg.script.clone();
                if let Some(path) = &cfg.script_path {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
                    let more: Vec<String> = serde_json::from_str(&text)
                        .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
                    replies.extend(more);
                }
                Self::mock_scripted(replies.into_iter().map(ScriptStep::Reply).collect(), cfg.max_retries)
            }
            ModelProvider::RemoteChat => {
                let transport =
                    transport.ok_or_else(|| GatewayError::Config("remote_chat needs an HTTP transport".into()))?;
                Self::remote(cfg, transport, image_root)
            }
        })
    }

    fn with_backend(backend: Backend, id: &str, max_retries: u32, backoff_ms: u64, max_in_flight: usize) -> Self {
        Self {
            backend,
            max_retries,
            backoff: Duration::from_millis(backoff_ms),
            calls: AtomicUsize::new(0),
            in_flight: InFlight::new(max_in_flight),
            id: id.to_string(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Logical `complete` calls so far (retries not counted).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, bundle: &PromptBundle) -> Result<ModelResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let _slot = self.in_flight.enter();
        let started = Instant::now();
        let attempts = self.max_retries + 1;
        let mut last = AttemptError::Transient(String::new());
        for attempt in 0..attempts {
            if attempt > 0 && !self.backoff.is_zero() {
                std::thread::sleep(self.backoff * 2u32.pow((attempt - 1).min(10)));
            }
            match self.attempt(bundle) {
                Ok(mut resp) => {
                    resp.attempts = attempt + 1;
                    resp.latency_ms = started.elapsed().as_millis() as u64;
                    return Ok(resp);
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(e) => last = e,
            }
        }
        Err(match last {
            AttemptError::Timeout(message) => GatewayError::Timeout { attempts, message },
            AttemptError::Transient(message) => GatewayError::Exhausted { attempts, message },
            AttemptError::Fatal(e) => e,
        })
    }

    fn reply(&self, text: String, bundle: &PromptBundle) -> ModelResponse {
        ModelResponse {
            completion_tokens: word_count(&text),
            prompt_tokens: word_count(&bundle.system_text) + word_count(&bundle.user_text),
            text,
            model_id: self.id.clone(),
            latency_ms: 0,
            attempts: 1,
        }
    }

    fn attempt(&self, bundle: &PromptBundle) -> Result<ModelResponse, AttemptError> {
        let lookup = |truth: &TruthMap| {
            truth.get(&bundle.sample_id, bundle.task).ok_or_else(|| {
                AttemptError::Fatal(GatewayError::MissingTruth { sample_id: bundle.sample_id.clone(), task: bundle.task })
            })
        };
        match &self.backend {
            Backend::Echo { truth } => Ok(self.reply(
                match bundle.stage {
                    Stage::Rationale => mock_rationale(bundle),
                    Stage::Answer => lookup(truth)?.to_string(),
                },
                bundle,
            )),
            Backend::Noisy { truth, sigma, penalty, seed } => Ok(self.reply(
                match bundle.stage {
                    Stage::Rationale => mock_rationale(bundle),
                    Stage::Answer => {
                        let sigma = sigma + penalty * bundle.flags.disabled() as f64;
                        noisy_label(lookup(truth)?, sigma, *seed, &bundle.sample_id, bundle.task).to_string()
                    }
                },
                bundle,
            )),
            Backend::Hash { seed } => {
                let mut material = seed.to_le_bytes().to_vec();
                material.extend(serde_json::to_vec(bundle).expect("bundle serializes"));
                let digest = sha256_hex(&material);
                let text = match bundle.stage {
                    Stage::Rationale => format!("Factors considered (digest {}).", &digest[..16]),
                    Stage::Answer => {
                        let n = derive_seed(*seed, &[&digest]) % 100;
                        format!("{} based on the digest {}", BinLabel::from_index(n as usize).expect("< 100"), &digest[..8])
                    }
                };
                Ok(self.reply(text, bundle))
            }
            Backend::Scripted { steps } => {
                let step = steps.lock().expect("script lock").pop_front();
                match step {
                    Some(ScriptStep::Reply(text)) => Ok(self.reply(text, bundle)),
                    Some(ScriptStep::TransientFailure(m)) => Err(AttemptError::Transient(m)),
                    Some(ScriptStep::Timeout(m)) => Err(AttemptError::Timeout(m)),
                    None => Err(AttemptError::Fatal(GatewayError::ScriptExhausted)),
                }
            }
            Backend::Remote(remote) => remote.attempt(bundle),
        }
    }
}

impl RemoteChat {
    fn request_body(&self, bundle: &PromptBundle) -> Result<Value, AttemptError> {
        let mut parts = vec![json!({"type": "text", "text": bundle.user_text})];
        for rel in &bundle.image_attachments {
            let path = self.image_root.join(rel);
            let bytes = std::fs::read(&path).map_err(|e| {
                AttemptError::Fatal(GatewayError::Config(format!("cannot read image {}: {e}", path.display())))
            })?;
            let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
            parts.push(json!({"type": "image_url", "image_url": {"url": format!("data:image/jpeg;base64,{b64}")}}));
        }
        Ok(json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": bundle.system_text},
                {"role": "user", "content": parts},
            ],
        }))
    }

    fn attempt(&self, bundle: &PromptBundle) -> Result<ModelResponse, AttemptError> {
        let body = self.request_body(bundle)?;
        let mut req = HttpRequest::post(self.endpoint.clone(), body.to_string()).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        self.limiter.acquire();
        let resp = match self.transport.send(&req) {
            Ok(r) => r,
            Err(TransportError::Timeout(m)) => return Err(AttemptError::Timeout(m)),
            Err(e) if e.is_transient() => return Err(AttemptError::Transient(e.to_string())),
            Err(e) => return Err(AttemptError::Fatal(GatewayError::Config(e.to_string()))),
        };
        if resp.status >= 500 || resp.status == 429 {
            return Err(AttemptError::Transient(format!("HTTP {}", resp.status)));
        }
        if !resp.is_success() {
            return Err(AttemptError::Fatal(GatewayError::Rejected { status: resp.status, message: resp.text() }));
        }
        let value: Value = serde_json::from_slice(&resp.body)
            .map_err(|e| AttemptError::Fatal(GatewayError::Malformed(e.to_string())))?;
        let content = &value["choices"][0]["message"]["content"];
        let text = match content {
            Value::String(s) => s.clone(),
            Value::Array(parts) => parts.iter().filter_map(|p| p["text"].as_str()).collect::<Vec<_>>().join(""),
            _ => return Err(AttemptError::Fatal(GatewayError::Malformed("missing choices[0].message.content".into()))),
        };
        let usage = |k: &str| value["usage"][k].as_u64().unwrap_or(0) as usize;
        Ok(ModelResponse {
            text,
            model_id: value["model"].as_str().unwrap_or(&self.model).to_string(),
            latency_ms: 0,
            prompt_tokens: usage("prompt_tokens"),
            completion_tokens: usage("completion_tokens"),
            attempts: 1,
        })
    }
}
