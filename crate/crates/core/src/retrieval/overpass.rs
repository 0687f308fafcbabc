//! Overpass-compatible place queries with client-side nearest-K truncation.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::transport::HttpRequest;
use super::{FailureKind, NearbyPlace, RetrievalConfig, RetrievalError};
use crate::geo::{haversine_deg, GeoPoint};

pub const PROVIDER: &str = "overpass";

/// Tag keys consulted, in order, to label a place's category.
const CATEGORY_KEYS: [&str; 12] = [
    "amenity",
    "shop",
    "tourism",
    "leisure",
    "office",
    "railway",
    "public_transport",
    "historic",
    "place",
    "building",
    "landuse",
    "natural",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsmNode {
    pub id: i64,
    pub lat: f64,
    pub lon: f64,
    #[serde(default)]
    pub tags: IndexMap<String, String>,
}

impl OsmNode {
    pub fn distance_to(&self, point: &GeoPoint) -> f64 {
        haversine_deg(point.lat(), point.lon(), self.lat, self.lon)
    }

    pub fn category(&self) -> Option<String> {
        CATEGORY_KEYS.iter().find_map(|k| self.tags.get(*k).map(|v| format!("{k}={v}")))
    }
}

pub fn places_query(point: &GeoPoint, cfg: &RetrievalConfig) -> String {
    let filter = cfg.places_tag_filter.as_deref().unwrap_or("");
    format!(
        "[out:json][timeout:25];node(around:{},{:.6},{:.6})[\"name\"]{filter}; out body {};",
        cfg.places_radius_m,
        point.lat(),
        point.lon(),
        cfg.places_limit * cfg.places_overfetch.max(1)
    )
}

/// Every tagged node within `radius_m`.
pub fn poi_query(point: &GeoPoint, radius_m: f64) -> String {
    format!("[out:json][timeout:25];node(around:{radius_m},{:.6},{:.6})[~\".\"~\".\"]; out body;", point.lat(), point.lon())
}

pub fn query_request(query: &str, cfg: &RetrievalConfig) -> HttpRequest {
    let body: String = url::form_urlencoded::Serializer::new(String::new()).append_pair("data", query).finish();
    HttpRequest::post(cfg.overpass_url.clone(), body).header("Content-Type", "application/x-www-form-urlencoded")
}

pub fn places_request(point: &GeoPoint, cfg: &RetrievalConfig) -> HttpRequest {
    query_request(&places_query(point, cfg), cfg)
}

pub fn poi_request(point: &GeoPoint, radius_m: f64, cfg: &RetrievalConfig) -> HttpRequest {
    query_request(&poi_query(point, radius_m), cfg)
}

#[derive(Deserialize)]
struct RawElement {
    #[serde(rename = "type")]
    kind: String,
    id: i64,
    lat: Option<f64>,
    lon: Option<f64>,
    #[serde(default)]
    tags: IndexMap<String, String>,
}

#[derive(Deserialize)]
struct RawResponse {
    #[serde(default)]
    elements: Vec<RawElement>,
    #[serde(default)]
    remark: Option<String>,
}

pub fn parse_nodes(body: &[u8]) -> Result<Vec<OsmNode>, RetrievalError> {
    let raw: RawResponse = serde_json::from_slice(body).map_err(|e| RetrievalError::Provider {
        provider: PROVIDER,
        kind: FailureKind::Parse,
        message: e.to_string(),
    })?;
    if let Some(remark) = raw.remark.filter(|r| r.to_ascii_lowercase().contains("error")) {
        return Err(RetrievalError::Provider { provider: PROVIDER, kind: FailureKind::Status, message: remark });
    }
    Ok(raw
        .elements
        .into_iter()
        .filter(|e| e.kind == "node")
        .filter_map(|e| match (e.lat, e.lon) {
            (Some(lat), Some(lon)) if lat.is_finite() && lon.is_finite() => Some(OsmNode { id: e.id, lat, lon, tags: e.tags }),
            _ => None,
        })
        .collect())
}

/// Named nodes within `radius_m`, nearest first (ties: name, then id),
/// truncated to `limit`.
pub fn nearest_places(point: &GeoPoint, nodes: &[OsmNode], radius_m: f64, limit: usize) -> Vec<NearbyPlace> {
    let mut places: Vec<(f64, &OsmNode, &str)> = nodes
        .iter()
        .filter_map(|n| {
            let name = n.tags.get("name")?.trim();
            if name.is_empty() {
                return None;
            }
            let d = n.distance_to(point);
            (d <= radius_m).then_some((d, n, name))
        })
        .collect();
    places.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.2.cmp(b.2)).then(a.1.id.cmp(&b.1.id)));
    places
        .into_iter()
        .take(limit)
        .filter_map(|(d, n, name)| {
            let location = GeoPoint::new(format!("osm:node/{}", n.id), n.lat, n.lon).ok()?;
            Some(NearbyPlace { name: name.to_string(), location, distance_m: d, category: n.category() })
        })
        .collect()
}
