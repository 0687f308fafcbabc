//! Geographic retrieval: reverse geocoding, nearby places and street-view
//! imagery behind a persistent cache, per-provider rate limits and
//! record/replay fixtures. [`Retriever::build_geo_context`] assembles the
//! per-point bundle fed to the prompt stage.

pub mod cache;
pub mod nominatim;
pub mod overpass;
pub mod streetview;
pub mod transport;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{haversine_distance, GeoPoint};
use cache::GeoCache;
use overpass::OsmNode;
use streetview::Metadata;
use transport::{
    CountingTransport, FixtureStore, HttpRequest, HttpResponse, RateLimitedTransport, RateLimiter,
    RecordReplayTransport, Transport, TransportError, TransportMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// Connection failure or timeout after all retries.
    Transport,
    /// Non-success HTTP status or error status in the payload.
    Status,
    /// Unreadable payload.
    Parse,
    /// The provider answered but had nothing for this location.
    NoResult,
}

impl std::fmt::Display for FailureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FailureKind::Transport => "transport failure",
            FailureKind::Status => "error status",
            FailureKind::Parse => "unreadable response",
            FailureKind::NoResult => "no result",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RetrievalError {
    #[error("{provider}: {kind}: {message}")]
    Provider { provider: &'static str, kind: FailureKind, message: String },
    #[error("no replay fixture for {url} (key {key})")]
    FixtureMiss { url: String, key: String },
    #[error("cache error: {0}")]
    Cache(String),
    #[error("invalid retrieval config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Address {
    pub display_name: String,
    pub components: IndexMap<String, String>,
    pub provider: String,
    pub retrieved_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearbyPlace {
    pub name: String,
    pub location: GeoPoint,
    pub distance_m: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageStatus {
    Available,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub status: ImageStatus,
    /// Relative to the cache directory; present iff Available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_path: Option<String>,
    pub capture_point: GeoPoint,
    pub offset_m: f64,
    pub heading: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pano_id: Option<String>,
    /// Number of metadata probes issued before settling.
    pub probes: usize,
}

impl ImageRef {
    pub fn is_available(&self) -> bool {
        self.status == ImageStatus::Available
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoContext {
    pub point: GeoPoint,
    pub address: Address,
    pub nearby: Vec<NearbyPlace>,
    pub image: ImageRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateLimits {
    pub geocode_rps: f64,
    pub places_rps: f64,
    pub imagery_rps: f64,
}

impl Default for RateLimits {
    fn default() -> Self {
        Self { geocode_rps: 1.0, places_rps: 2.0, imagery_rps: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub places_radius_m: f64,
    pub places_limit: usize,
    /// Server-side over-fetch multiplier before nearest-K truncation.
    pub places_overfetch: usize,
    /// Extra Overpass tag filter appended to the `["name"]` selector,
    /// e.g. `["amenity"]`.
    pub places_tag_filter: Option<String>,
    pub svi_radius_m: f64,
    pub resample_probes: usize,
    pub svi_size: String,
    pub svi_heading: f64,
    pub rate_limits: RateLimits,
    pub cache_dir: PathBuf,
    pub fixtures_dir: PathBuf,
    pub mode: TransportMode,
    pub nominatim_url: String,
    pub overpass_url: String,
    pub streetview_url: String,
    /// Name of the environment variable holding the imagery API key.
    pub streetview_key_env: String,
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub timeout_s: u64,
    pub workers: usize,
    pub seed: u64,
    pub user_agent: String,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            places_radius_m: 100_000.0,
            places_limit: 10,
            places_overfetch: 5,
            places_tag_filter: None,
            svi_radius_m: 40.0,
            resample_probes: 8,
            svi_size: "640x640".into(),
            svi_heading: 0.0,
            rate_limits: RateLimits::default(),
            cache_dir: PathBuf::from("cache"),
            fixtures_dir: PathBuf::from("fixtures"),
            mode: TransportMode::Replay,
            nominatim_url: "https://nominatim.openstreetmap.org".into(),
            overpass_url: "https://overpass-api.de/api/interpreter".into(),
            streetview_url: "https://maps.googleapis.com/maps/api/streetview".into(),
            streetview_key_env: "SVLLM_STREETVIEW_KEY".into(),
            max_attempts: 3,
            backoff_ms: 500,
            timeout_s: 30,
            workers: 4,
            seed: 0,
            user_agent: concat!("svllm/", env!("CARGO_PKG_VERSION")).into(),
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        for (name, r) in [("places_radius_m", self.places_radius_m), ("svi_radius_m", self.svi_radius_m)] {
            if !(r.is_finite() && r > 0.0) {
                return Err(RetrievalError::Config(format!("{name} must be positive, got {r}")));
            }
        }
        if self.places_limit == 0 {
            return Err(RetrievalError::Config("places_limit must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Provider {
    Geocode,
    Places,
    Imagery,
}

impl Provider {
    fn name(self) -> &'static str {
        match self {
            Provider::Geocode => nominatim::PROVIDER,
            Provider::Places => overpass::PROVIDER,
            Provider::Imagery => streetview::PROVIDER,
        }
    }
}

/// Retrieval client. Thread-safe; rate limits are shared by every caller.
pub struct Retriever {
    cfg: RetrievalConfig,
    cache: GeoCache,
    network: Arc<CountingTransport<Arc<dyn Transport>>>,
    requests: AtomicUsize,
    geocode: RecordReplayTransport,
    places: RecordReplayTransport,
    imagery: RecordReplayTransport,
}

impl Retriever {
    /// `network` is only consulted in Live and Record modes.
    pub fn new(cfg: RetrievalConfig, network: Arc<dyn Transport>) -> Result<Self, RetrievalError> {
        cfg.validate()?;
        let network = Arc::new(CountingTransport::new(network));
        let store = FixtureStore::new(cfg.fixtures_dir.clone());
        let stack = |rps: f64| {
            let limited: Arc<dyn Transport> =
                Arc::new(RateLimitedTransport::new(network.clone(), Arc::new(RateLimiter::new(rps))));
            RecordReplayTransport::new(cfg.mode, limited, store.clone())
        };
        let rl = cfg.rate_limits;
        Ok(Self {
            cache: GeoCache::new(cfg.cache_dir.clone()),
            geocode: stack(rl.geocode_rps),
            places: stack(rl.places_rps),
            imagery: stack(rl.imagery_rps),
            network,
            requests: AtomicUsize::new(0),
            cfg,
        })
    }

    /// Retriever over the real network (reqwest).
    pub fn live(cfg: RetrievalConfig) -> Result<Self, RetrievalError> {
        let http = transport::HttpTransport::new(Duration::from_secs(cfg.timeout_s), &cfg.user_agent)
            .map_err(|e| RetrievalError::Config(e.to_string()))?;
        Self::new(cfg, Arc::new(http))
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &GeoCache {
        &self.cache
    }

    /// Requests that reached the network transport.
    pub fn network_calls(&self) -> usize {
        self.network.calls()
    }

    /// Provider requests issued on cache misses, whether answered by a
    /// fixture or the network.
    pub fn provider_requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn fetch(&self, provider: Provider, req: &HttpRequest) -> Result<HttpResponse, RetrievalError> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let transport = match provider {
            Provider::Geocode => &self.geocode,
            Provider::Places => &self.places,
            Provider::Imagery => &self.imagery,
        };
        let attempts = self.cfg.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 && self.cfg.backoff_ms > 0 {
                std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempt - 1).min(10)));
            }
            match transport.send(req) {
                Ok(resp) if resp.status >= 500 || resp.status == 429 => {
                    last = format!("HTTP {} from {}", resp.status, req.canonical_url());
                }
                Ok(resp) if !resp.is_success() => {
                    return Err(RetrievalError::Provider {
                        provider: provider.name(),
                        kind: FailureKind::Status,
                        message: format!("HTTP {} from {}", resp.status, req.canonical_url()),
                    });
                }
                Ok(resp) => return Ok(resp),
                Err(TransportError::FixtureMiss { url, key, .. }) => return Err(RetrievalError::FixtureMiss { url, key }),
                Err(e) if e.is_transient() => last = e.to_string(),
                Err(e) => {
                    return Err(RetrievalError::Provider {
                        provider: provider.name(),
                        kind: FailureKind::Transport,
                        message: e.to_string(),
                    })
                }
            }
        }
        let kind = if last.starts_with("HTTP") { FailureKind::Status } else { FailureKind::Transport };
        Err(RetrievalError::Provider {
            provider: provider.name(),
            kind,
            message: format!("giving up after {attempts} attempts: {last}"),
        })
    }

    fn cached<T, F>(&self, op: &str, point: &GeoPoint, params: &str, compute: F) -> Result<T, RetrievalError>
    where
        T: Serialize + serde::de::DeserializeOwned,
        F: FnOnce() -> Result<T, RetrievalError>,
    {
        let cache_err = |e: std::io::Error| RetrievalError::Cache(e.to_string());
        if let Some(hit) = self.cache.get(op, point, params).map_err(cache_err)? {
            return Ok(hit);
        }
        let value = compute()?;
        self.cache.put(op, point, params, &value).map_err(cache_err)?;
        Ok(value)
    }

    pub fn reverse_geocode(&self, point: &GeoPoint) -> Result<Address, RetrievalError> {
        self.cached("geocode", point, "", || {
            let resp = self.fetch(Provider::Geocode, &nominatim::geocode_request(point, &self.cfg))?;
            nominatim::parse_address(&resp.body, Utc::now())
        })
    }

    pub fn nearby_places(&self, point: &GeoPoint) -> Result<Vec<NearbyPlace>, RetrievalError> {
        let params = format!(
            "r={};n={};k={};f={}",
            self.cfg.places_radius_m,
            self.cfg.places_limit,
            self.cfg.places_overfetch,
            self.cfg.places_tag_filter.as_deref().unwrap_or("")
        );
        self.cached("places", point, &params, || {
            let resp = self.fetch(Provider::Places, &overpass::places_request(point, &self.cfg))?;
            let nodes = overpass::parse_nodes(&resp.body)?;
            Ok(overpass::nearest_places(point, &nodes, self.cfg.places_radius_m, self.cfg.places_limit))
        })
    }

    /// Tagged OSM nodes within `radius_m`, nearest first.
    pub fn poi_nodes(&self, point: &GeoPoint, radius_m: f64) -> Result<Vec<OsmNode>, RetrievalError> {
        self.cached("poi", point, &format!("r={radius_m}"), || {
            let resp = self.fetch(Provider::Places, &overpass::poi_request(point, radius_m, &self.cfg))?;
            let mut nodes: Vec<(f64, OsmNode)> = overpass::parse_nodes(&resp.body)?
                .into_iter()
                .map(|n| (n.distance_to(point), n))
                .filter(|(d, _)| *d <= radius_m)
                .collect();
            nodes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
            Ok(nodes.into_iter().map(|(_, n)| n).collect())
        })
    }

    /// Probes the requested point, then the jitter probes inside the buffer;
    /// returns the first capture within `svi_radius_m`, else Missing.
    pub fn fetch_street_view(&self, point: &GeoPoint) -> Result<ImageRef, RetrievalError> {
        let cfg = &self.cfg;
        let params = format!(
            "r={};n={};size={};h={};seed={}",
            cfg.svi_radius_m, cfg.resample_probes, cfg.svi_size, cfg.svi_heading, cfg.seed
        );
        let mut image = self.cached("svi", point, &params, || {
            let mut probes = vec![point.clone()];
            probes.extend(streetview::jitter_probes(point, cfg.seed, cfg.resample_probes, cfg.svi_radius_m));
            for (k, probe) in probes.iter().enumerate() {
                let meta = self.fetch(Provider::Imagery, &streetview::metadata_request(probe, cfg))?;
                let Metadata::Available { lat, lon, pano_id } = streetview::parse_metadata(&meta.body)? else {
                    continue;
                };
                let capture = match (lat, lon) {
                    (Some(lat), Some(lon)) => GeoPoint::new(point.id.clone(), lat, lon).map_err(|e| RetrievalError::Provider {
                        provider: streetview::PROVIDER,
                        kind: FailureKind::Parse,
                        message: e.to_string(),
                    })?,
                    _ => probe.clone(),
                };
                let offset_m = haversine_distance(point, &capture);
                if offset_m > cfg.svi_radius_m {
                    continue;
                }
                let resp = self.fetch(Provider::Imagery, &streetview::image_request(&capture, pano_id.as_deref(), cfg))?;
                if !resp.content_type.as_deref().unwrap_or("image/jpeg").starts_with("image/") {
                    return Err(RetrievalError::Provider {
                        provider: streetview::PROVIDER,
                        kind: FailureKind::Parse,
                        message: format!("expected image bytes, got {:?}", resp.content_type),
                    });
                }
                let (rel, hash) = self.cache.put_image(&resp.body).map_err(|e| RetrievalError::Cache(e.to_string()))?;
                return Ok(ImageRef {
                    status: ImageStatus::Available,
                    local_path: Some(rel),
                    capture_point: capture,
                    offset_m,
                    heading: cfg.svi_heading,
                    content_hash: Some(hash),
                    pano_id,
                    probes: k + 1,
                });
            }
            Ok(ImageRef {
                status: ImageStatus::Missing,
                local_path: None,
                capture_point: point.clone(),
                offset_m: 0.0,
                heading: cfg.svi_heading,
                content_hash: None,
                pano_id: None,
                probes: probes.len(),
            })
        })?;
        // cache entries are keyed by coordinates; re-bind to this sample
        image.capture_point = image.capture_point.with_id(point.id.clone());
        Ok(image)
    }

    /// Address failures abort; a Missing image is carried in the context.
    pub fn build_geo_context(&self, point: &GeoPoint) -> Result<GeoContext, RetrievalError> {
        let address = self.reverse_geocode(point)?;
        let nearby = self.nearby_places(point)?;
        let image = self.fetch_street_view(point)?;
        Ok(GeoContext { point: point.clone(), address, nearby, image })
    }

    /// Builds contexts for many points on `cfg.workers` threads, preserving
    /// input order.
    pub fn build_many(&self, points: &[GeoPoint]) -> Vec<Result<GeoContext, RetrievalError>> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(self.cfg.workers.max(1)).build();
        match pool {
            Ok(pool) => pool.install(|| points.par_iter().map(|p| self.build_geo_context(p)).collect()),
            Err(_) => points.iter().map(|p| self.build_geo_context(p)).collect(),
        }
    }
}
