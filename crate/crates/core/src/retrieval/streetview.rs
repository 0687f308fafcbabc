//! Street View Static API-compatible imagery: metadata probing, buffer
//! resampling and image download.

use rand::Rng;
use serde::Deserialize;

use super::transport::HttpRequest;
use super::{FailureKind, RetrievalConfig, RetrievalError};
use crate::geo::GeoPoint;
use crate::seed::rng_for;

pub const PROVIDER: &str = "streetview";

/// Jitter rings sit at half the buffer and just inside its edge, so every
/// probe stays strictly within the configured radius.
pub const INNER_RING: f64 = 0.5;
pub const OUTER_RING: f64 = 0.995;

fn api_key(cfg: &RetrievalConfig) -> String {
    std::env::var(&cfg.streetview_key_env).unwrap_or_default()
}

fn base_url(cfg: &RetrievalConfig, suffix: &str) -> url::Url {
    let raw = format!("{}{suffix}", cfg.streetview_url.trim_end_matches('/'));
    url::Url::parse(&raw).unwrap_or_else(|_| url::Url::parse("http://invalid/").expect("static url"))
}

pub fn metadata_request(probe: &GeoPoint, cfg: &RetrievalConfig) -> HttpRequest {
    let mut url = base_url(cfg, "/metadata");
    url.query_pairs_mut()
        .append_pair("location", &format!("{:.6},{:.6}", probe.lat(), probe.lon()))
        .append_pair("radius", &format!("{}", cfg.svi_radius_m))
        .append_pair("source", "outdoor")
        .append_pair("key", &api_key(cfg));
    HttpRequest::get(url.to_string())
}

pub fn image_request(capture: &GeoPoint, pano_id: Option<&str>, cfg: &RetrievalConfig) -> HttpRequest {
    let mut url = base_url(cfg, "");
    {
        let mut q = url.query_pairs_mut();
        q.append_pair("size", &cfg.svi_size);
        match pano_id {
            Some(pano) => q.append_pair("pano", pano),
            None => q.append_pair("location", &format!("{:.6},{:.6}", capture.lat(), capture.lon())),
        };
        q.append_pair("heading", &format!("{}", cfg.svi_heading))
            .append_pair("radius", &format!("{}", cfg.svi_radius_m))
            .append_pair("source", "outdoor")
            .append_pair("key", &api_key(cfg));
    }
    HttpRequest::get(url.to_string())
}

/// Resampling probes: `n` points on two rings inside the buffer, at uniform
/// angles with a rotation seeded by `(seed, point id)`. Inner ring first.
pub fn jitter_probes(point: &GeoPoint, seed: u64, n: usize, radius_m: f64) -> Vec<GeoPoint> {
    if n == 0 {
        return Vec::new();
    }
    let mut rng = rng_for(seed, &["svi-jitter", &point.id]);
    let rotation: f64 = rng.random_range(0.0..360.0);
    let inner = n.div_ceil(2);
    let outer = n - inner;
    let mut probes = Vec::with_capacity(n);
    for (count, ring, phase) in [(inner, INNER_RING, 0.0), (outer, OUTER_RING, 0.5)] {
        for k in 0..count {
            let bearing = rotation + 360.0 * (k as f64 + phase) / count as f64;
            probes.push(point.destination(point.id.clone(), bearing.rem_euclid(360.0), ring * radius_m));
        }
    }
    probes
}

#[derive(Debug, Clone, PartialEq)]
pub enum Metadata {
    Available { lat: Option<f64>, lon: Option<f64>, pano_id: Option<String> },
    NoImagery,
}

#[derive(Deserialize)]
struct RawLocation {
    lat: f64,
    lng: f64,
}

#[derive(Deserialize)]
struct RawMetadata {
    status: String,
    #[serde(default)]
    location: Option<RawLocation>,
    #[serde(default)]
    pano_id: Option<String>,
    #[serde(default)]
    error_message: Option<String>,
}

/// `OK` means imagery exists; `ZERO_RESULTS`/`NOT_FOUND` is a definitive
/// "no imagery" answer. Any other status is a provider error.
pub fn parse_metadata(body: &[u8]) -> Result<Metadata, RetrievalError> {
    let raw: RawMetadata = serde_json::from_slice(body).map_err(|e| RetrievalError::Provider {
        provider: PROVIDER,
        kind: FailureKind::Parse,
        message: e.to_string(),
    })?;
    match raw.status.as_str() {
        "OK" => Ok(Metadata::Available {
            lat: raw.location.as_ref().map(|l| l.lat),
            lon: raw.location.as_ref().map(|l| l.lng),
            pano_id: raw.pano_id,
        }),
        "ZERO_RESULTS" | "NOT_FOUND" => Ok(Metadata::NoImagery),
        other => Err(RetrievalError::Provider {
            provider: PROVIDER,
            kind: FailureKind::Status,
            message: format!("{other}: {}", raw.error_message.unwrap_or_default()),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::haversine_distance;

    #[test]
    fn probes_inside_buffer_and_deterministic() {
        let p = GeoPoint::new("sample-7", 51.5, -0.12).unwrap();
        let a = jitter_probes(&p, 42, 8, 40.0);
        assert_eq!(a, jitter_probes(&p, 42, 8, 40.0));
        assert_eq!(a.len(), 8);
        for q in &a {
            let d = haversine_distance(&p, q);
            assert!(d > 0.0 && d <= 40.0, "{d}");
        }
        let rings: Vec<f64> = a.iter().map(|q| haversine_distance(&p, q)).collect();
        assert!(rings[..4].iter().all(|d| (d - 20.0).abs() < 1e-6));
        assert!(rings[4..].iter().all(|d| (d - 39.8).abs() < 1e-6));
        assert_ne!(a, jitter_probes(&p.with_id("other"), 42, 8, 40.0));
        assert!(jitter_probes(&p, 42, 0, 40.0).is_empty());
    }

    #[test]
    fn metadata_statuses() {
        assert!(matches!(
            parse_metadata(br#"{"status":"OK","location":{"lat":1.0,"lng":2.0},"pano_id":"x"}"#).unwrap(),
            Metadata::Available { pano_id: Some(_), .. }
        ));
        assert_eq!(parse_metadata(br#"{"status":"ZERO_RESULTS"}"#).unwrap(), Metadata::NoImagery);
        assert!(parse_metadata(br#"{"status":"REQUEST_DENIED","error_message":"bad key"}"#).is_err());
    }

    #[test]
    fn key_is_redacted_in_canonical_form() {
        let cfg = RetrievalConfig::default();
        let p = GeoPoint::new("a", 1.0, 2.0).unwrap();
        let req = metadata_request(&p, &cfg);
        assert!(req.canonical_url().contains("key=REDACTED"));
        let img = image_request(&p, Some("pano1"), &cfg);
        assert!(img.url.contains("pano=pano1") && img.url.contains("size=640x640"));
    }
}
