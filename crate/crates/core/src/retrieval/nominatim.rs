//! Nominatim-compatible reverse geocoding (`/reverse?format=jsonv2`).

use chrono::{DateTime, Utc};
use indexmap::IndexMap;
use serde_json::Value;

use super::transport::HttpRequest;
use super::{Address, FailureKind, RetrievalConfig, RetrievalError};
use crate::geo::GeoPoint;

pub const PROVIDER: &str = "nominatim";

pub fn geocode_request(point: &GeoPoint, cfg: &RetrievalConfig) -> HttpRequest {
    let mut url = url::Url::parse(&format!("{}/reverse", cfg.nominatim_url.trim_end_matches('/')))
        .unwrap_or_else(|_| url::Url::parse("http://invalid/reverse").expect("static url"));
    url.query_pairs_mut()
        .append_pair("format", "jsonv2")
        .append_pair("lat", &format!("{:.6}", point.lat()))
        .append_pair("lon", &format!("{:.6}", point.lon()))
        .append_pair("addressdetails", "1");
    HttpRequest::get(url.to_string())
}

fn parse_error(message: impl Into<String>) -> RetrievalError {
    RetrievalError::Provider { provider: PROVIDER, kind: FailureKind::Parse, message: message.into() }
}

pub fn parse_address(body: &[u8], retrieved_at: DateTime<Utc>) -> Result<Address, RetrievalError> {
    let value: Value = serde_json::from_slice(body).map_err(|e| parse_error(e.to_string()))?;
    if let Some(err) = value.get("error") {
        return Err(RetrievalError::Provider {
            provider: PROVIDER,
            kind: FailureKind::NoResult,
            message: err.as_str().map(str::to_string).unwrap_or_else(|| err.to_string()),
        });
    }
    let display_name = value
        .get("display_name")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| parse_error("missing display_name"))?
        .to_string();
    let mut components = IndexMap::new();
    if let Some(Value::Object(map)) = value.get("address") {
        for (k, v) in map {
            let text = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            components.insert(k.clone(), text);
        }
    }
    Ok(Address { display_name, components, provider: PROVIDER.to_string(), retrieved_at })
}
