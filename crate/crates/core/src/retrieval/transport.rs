//! Blocking HTTP transport abstraction with request counting, rate limiting
//! and record/replay fixtures.
//!
//! A fixture is keyed by `sha256(method \n canonical_url \n body)`. The
//! canonical URL has its query pairs sorted and secret parameters redacted,
//! so recordings never contain API keys and replay works without them.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::sha256_hex;

/// Query parameters whose values are replaced by `REDACTED` before hashing
/// or persisting a request.
pub const SECRET_PARAMS: [&str; 6] = ["key", "api_key", "apikey", "token", "access_token", "signature"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpRequest {
    pub method: Method,
    pub url: String,
    pub body: Option<String>,
    /// Sent but never hashed or recorded (may carry credentials).
    pub headers: Vec<(String, String)>,
}

impl HttpRequest {
    pub fn get(url: impl Into<String>) -> Self {
        Self { method: Method::Get, url: url.into(), body: None, headers: Vec::new() }
    }

    pub fn post(url: impl Into<String>, body: impl Into<String>) -> Self {
        Self { method: Method::Post, url: url.into(), body: Some(body.into()), headers: Vec::new() }
    }

    pub fn header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    /// URL with sorted query pairs and secrets redacted.
    pub fn canonical_url(&self) -> String {
        canonical_url(&self.url)
    }

    pub fn fixture_key(&self) -> String {
        let mut material = String::new();
        material.push_str(self.method.as_str());
        material.push('\n');
        material.push_str(&self.canonical_url());
        material.push('\n');
        material.push_str(self.body.as_deref().unwrap_or(""));
        sha256_hex(material)
    }
}

pub fn canonical_url(raw: &str) -> String {
    let Ok(mut url) = url::Url::parse(raw) else {
        return raw.to_string();
    };
    let mut pairs: Vec<(String, String)> = url
        .query_pairs()
        .map(|(k, v)| {
            let v = if SECRET_PARAMS.contains(&k.to_ascii_lowercase().as_str()) { "REDACTED".to_string() } else { v.into_owned() };
            (k.into_owned(), v)
        })
        .collect();
    if pairs.is_empty() {
        url.set_query(None);
    } else {
        pairs.sort();
        url.query_pairs_mut().clear().extend_pairs(pairs);
    }
    url.to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpResponse {
    pub status: u16,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn json(status: u16, body: impl Into<String>) -> Self {
        Self { status, content_type: Some("application/json".into()), body: body.into().into_bytes() }
    }

    pub fn bytes(status: u16, content_type: &str, body: Vec<u8>) -> Self {
        Self { status, content_type: Some(content_type.into()), body }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("no recorded fixture for {method} {url} (key {key})")]
    FixtureMiss { method: &'static str, url: String, key: String },
    #[error("fixture store error: {0}")]
    Store(String),
}

impl TransportError {
    /// Timeouts and connection failures are worth retrying.
    pub fn is_transient(&self) -> bool {
        matches!(self, TransportError::Timeout(_) | TransportError::Connection(_))
    }
}

pub trait Transport: Send + Sync {
    fn send(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn send(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError> {
        (**self).send(req)
    }
}

/// Live network access through reqwest.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration, user_agent: &str) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .user_agent(user_agent)
            .build()
            .map_err(|e| TransportError::Connection(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let mut builder = match req.method {
            Method::Get => self.client.get(&req.url),
            Method::Post => self.client.post(&req.url),
        };
        for (name, value) in &req.headers {
            builder = builder.header(name, value);
        }
        if let Some(body) = &req.body {
            builder = builder.body(body.clone());
        }
        let map_err = |e: reqwest::Error| {
            if e.is_timeout() {
                TransportError::Timeout(e.to_string())
            } else {
                TransportError::Connection(e.to_string())
            }
        };
        let resp = builder.send().map_err(map_err)?;
        let status = resp.status().as_u16();
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        let body = resp.bytes().map_err(map_err)?.to_vec();
        Ok(HttpResponse { status, content_type, body })
    }
}

/// Counts every request that passes through.
pub struct CountingTransport<T> {
    inner: T,
    calls: AtomicUsize,
}

impl<T: Transport> CountingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<T: Transport> Transport for CountingTransport<T> {
    fn send(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.send(req)
    }
}

/// Minimum-interval limiter shared by every worker using one provider.
pub struct RateLimiter {
    interval: Option<Duration>,
    next: Mutex<Instant>,
}

impl RateLimiter {
    /// `requests_per_second <= 0` or non-finite disables limiting.
    pub fn new(requests_per_second: f64) -> Self {
        let interval = (requests_per_second.is_finite() && requests_per_second > 0.0)
            .then(|| Duration::from_secs_f64(1.0 / requests_per_second));
        Self { interval, next: Mutex::new(Instant::now()) }
    }

    pub fn acquire(&self) {
        let Some(interval) = self.interval else { return };
        let wait = {
            let mut next = self.next.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + interval;
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

pub struct RateLimitedTransport<T> {
    inner: T,
    limiter: Arc<RateLimiter>,
}

impl<T: Transport> RateLimitedTransport<T> {
    pub fn new(inner: T, limiter: Arc<RateLimiter>) -> Self {
        Self { inner, limiter }
    }
}

impl<T: Transport> Transport for RateLimitedTransport<T> {
    fn send(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError> {
        self.limiter.acquire();
        self.inner.send(req)
    }
}

/// Test double driven by a closure.
pub struct ScriptedTransport<F> {
    handler: F,
}

impl<F> ScriptedTransport<F>
where
    F: Fn(&HttpRequest) -> Result<HttpResponse, TransportError> + Send + Sync,
{
    pub fn new(handler: F) -> Self {
        Self { handler }
    }
}

impl<F> Transport for ScriptedTransport<F>
where
    F: Fn(&HttpRequest) -> Result<HttpResponse, TransportError> + Send + Sync,
{
    fn send(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError> {
        (self.handler)(req)
    }
}

/// Transport that refuses every request; the network side of Replay mode.
pub struct OfflineTransport;

impl Transport for OfflineTransport {
    fn send(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError> {
        Err(TransportError::Connection(format!("network disabled: {} {}", req.method.as_str(), req.canonical_url())))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FixtureRequest {
    method: Method,
    url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    body: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FixtureResponse {
    status: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    content_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    body: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    body_b64: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Fixture {
    request: FixtureRequest,
    response: FixtureResponse,
}

/// On-disk fixtures, one JSON file per request key.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn load(&self, req: &HttpRequest) -> Result<Option<HttpResponse>, TransportError> {
        let path = self.path_for(&req.fixture_key());
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(TransportError::Store(format!("{}: {e}", path.display()))),
        };
        let fixture: Fixture =
            serde_json::from_str(&text).map_err(|e| TransportError::Store(format!("{}: {e}", path.display())))?;
        let body = match (fixture.response.body, fixture.response.body_b64) {
            (_, Some(b64)) => base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| TransportError::Store(format!("{}: {e}", path.display())))?,
            (Some(text), None) => text.into_bytes(),
            (None, None) => Vec::new(),
        };
        Ok(Some(HttpResponse { status: fixture.response.status, content_type: fixture.response.content_type, body }))
    }

    pub fn save(&self, req: &HttpRequest, resp: &HttpResponse) -> Result<PathBuf, TransportError> {
        let key = req.fixture_key();
        let path = self.path_for(&key);
        let (body, body_b64) = match std::str::from_utf8(&resp.body) {
            Ok(text) if !resp.content_type.as_deref().unwrap_or("").starts_with("image/") => (Some(text.to_string()), None),
            _ => (None, Some(base64::engine::general_purpose::STANDARD.encode(&resp.body))),
        };
        let fixture = Fixture {
            request: FixtureRequest { method: req.method, url: req.canonical_url(), body: req.body.clone() },
            response: FixtureResponse { status: resp.status, content_type: resp.content_type.clone(), body, body_b64 },
        };
        let text = serde_json::to_string_pretty(&fixture).expect("fixture serializes");
        write_atomic(&path, text.as_bytes()).map_err(|e| TransportError::Store(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!("tmp.{}.{:?}", std::process::id(), std::thread::current().id()).replace(['(', ')'], ""));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    /// Network only.
    Live,
    /// Fixtures only; the network is never touched.
    #[default]
    Replay,
    /// Network, persisting every non-5xx response as a fixture.
    Record,
}

impl std::str::FromStr for TransportMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "live" => Ok(TransportMode::Live),
            "replay" => Ok(TransportMode::Replay),
            "record" => Ok(TransportMode::Record),
            other => Err(format!("unknown mode {other:?} (expected live, replay or record)")),
        }
    }
}

pub struct RecordReplayTransport {
    mode: TransportMode,
    network: Arc<dyn Transport>,
    store: FixtureStore,
}

impl RecordReplayTransport {
    pub fn new(mode: TransportMode, network: Arc<dyn Transport>, store: FixtureStore) -> Self {
        Self { mode, network, store }
    }

    pub fn mode(&self) -> TransportMode {
        self.mode
    }
}

impl Transport for RecordReplayTransport {
    fn send(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError> {
        match self.mode {
            TransportMode::Replay => self.store.load(req)?.ok_or_else(|| TransportError::FixtureMiss {
                method: req.method.as_str(),
                url: req.canonical_url(),
                key: req.fixture_key(),
            }),
            TransportMode::Live => self.network.send(req),
            TransportMode::Record => {
                let resp = self.network.send(req)?;
                if resp.status < 500 {
                    self.store.save(req, &resp)?;
                }
                Ok(resp)
            }
        }
    }
}
