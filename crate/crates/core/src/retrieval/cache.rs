//! Persistent result cache laid out as `<dir>/<op>/<geohash-prefix>/<key>.json`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::transport::write_atomic;
use crate::geo::GeoPoint;
use crate::seed::sha256_hex;

const GEOHASH_ALPHABET: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";
pub const GEOHASH_PREFIX_LEN: usize = 5;

/// Standard base-32 geohash of a coordinate.
pub fn geohash(lat: f64, lon: f64, precision: usize) -> String {
    let (mut lat_lo, mut lat_hi) = (-90.0, 90.0);
    let (mut lon_lo, mut lon_hi) = (-180.0, 180.0);
    let mut out = String::with_capacity(precision);
    let mut even = true;
    let mut bits = 0u8;
    let mut n_bits = 0;
    while out.len() < precision {
        let (lo, hi, v) = if even { (&mut lon_lo, &mut lon_hi, lon) } else { (&mut lat_lo, &mut lat_hi, lat) };
        let mid = (*lo + *hi) / 2.0;
        bits <<= 1;
        if v >= mid {
            bits |= 1;
            *lo = mid;
        } else {
            *hi = mid;
        }
        even = !even;
        n_bits += 1;
        if n_bits == 5 {
            out.push(GEOHASH_ALPHABET[bits as usize] as char);
            bits = 0;
            n_bits = 0;
        }
    }
    out
}

/// Coordinates rounded to 6 decimals (~0.11 m), the cache-key resolution.
pub fn rounded_coords(point: &GeoPoint) -> (String, String) {
    (format!("{:.6}", point.lat()), format!("{:.6}", point.lon()))
}

#[derive(Debug, Clone)]
pub struct GeoCache {
    dir: PathBuf,
}

impl GeoCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Stable key for `(op, rounded point, params)`.
    pub fn key(op: &str, point: &GeoPoint, params: &str) -> String {
        let (lat, lon) = rounded_coords(point);
        sha256_hex(format!("{op}|{lat}|{lon}|{params}"))[..32].to_string()
    }

    pub fn path(&self, op: &str, point: &GeoPoint, params: &str) -> PathBuf {
        let (lat, lon) = rounded_coords(point);
        let prefix = geohash(lat.parse().unwrap_or(0.0), lon.parse().unwrap_or(0.0), GEOHASH_PREFIX_LEN);
        self.dir.join(op).join(prefix).join(format!("{}.json", Self::key(op, point, params)))
    }

    pub fn get<T: DeserializeOwned>(&self, op: &str, point: &GeoPoint, params: &str) -> io::Result<Option<T>> {
        let path = self.path(op, point, params);
        match fs::read(&path) {
            Ok(bytes) => match serde_json::from_slice(&bytes) {
                Ok(value) => Ok(Some(value)),
                Err(e) => {
                    log::warn!("ignoring unreadable cache entry {}: {e}", path.display());
                    Ok(None)
                }
            },
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put<T: Serialize>(&self, op: &str, point: &GeoPoint, params: &str, value: &T) -> io::Result<()> {
        let bytes = serde_json::to_vec_pretty(value).map_err(io::Error::other)?;
        write_atomic(&self.path(op, point, params), &bytes)
    }

    /// Stores image bytes content-addressed; returns `(relative path, hex digest)`.
    pub fn put_image(&self, bytes: &[u8]) -> io::Result<(String, String)> {
        let hash = sha256_hex(bytes);
        let rel = format!("img/{hash}.jpg");
        let path = self.dir.join(&rel);
        if !path.exists() {
            write_atomic(&path, bytes)?;
        }
        Ok((rel, hash))
    }
}
