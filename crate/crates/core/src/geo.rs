//! Geographic primitives: validated WGS84 points, great-circle distance and
//! bounding boxes.
//!
//! - Angles are expressed in **degrees**.
//! - Distances are expressed in **meters**.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius used by every distance computation in the crate.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("invalid latitude {0}; expected finite degrees in [-90, 90]")]
    InvalidLatitude(f64),
    #[error("invalid longitude {0}; expected finite degrees in [-180, 180]")]
    InvalidLongitude(f64),
    #[error("empty input: at least one point is required")]
    EmptyInput,
    #[error("invalid bounding box: min_{axis} {min} > max_{axis} {max}")]
    InvalidBBox { axis: &'static str, min: f64, max: f64 },
}

/// A WGS84 coordinate carrying an opaque sample identifier.
///
/// Longitude is normalized to `[-180, 180)` at construction, so `180.0`
/// becomes `-180.0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint")]
pub struct GeoPoint {
    pub id: String,
    lat: f64,
    lon: f64,
}

#[derive(Deserialize)]
struct RawPoint {
    id: String,
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = GeoError;

    fn try_from(raw: RawPoint) -> Result<Self, Self::Error> {
        GeoPoint::new(raw.id, raw.lat, raw.lon)
    }
}

impl GeoPoint {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::InvalidLatitude(lat));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::InvalidLongitude(lon));
        }
        let lon = if lon == 180.0 { -180.0 } else { lon };
        Ok(Self { id: id.into(), lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// Same coordinates under a different identifier.
    pub fn with_id(&self, id: impl Into<String>) -> Self {
        Self { id: id.into(), lat: self.lat, lon: self.lon }
    }

    pub fn same_coords(&self, other: &GeoPoint) -> bool {
        self.lat == other.lat && self.lon == other.lon
    }

    /// Point reached by travelling `distance_m` along the great circle with
    /// initial `bearing_deg` (clockwise from north).
    pub fn destination(&self, id: impl Into<String>, bearing_deg: f64, distance_m: f64) -> Self {
        let delta = distance_m / EARTH_RADIUS_M;
        let theta = bearing_deg.to_radians();
        let phi1 = self.lat.to_radians();
        let lambda1 = self.lon.to_radians();
        let phi2 = (phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * theta.cos())
            .clamp(-1.0, 1.0)
            .asin();
        let lambda2 = lambda1
            + (theta.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * phi2.sin());
        let mut lon = lambda2.to_degrees();
        lon = (lon + 540.0).rem_euclid(360.0) - 180.0;
        Self { id: id.into(), lat: phi2.to_degrees().clamp(-90.0, 90.0), lon }
    }
}

/// Great-circle distance between two points in meters (haversine formula).
///
/// Absolute coordinate differences are used so the result is bitwise
/// symmetric in its arguments.
pub fn haversine_distance(a: &GeoPoint, b: &GeoPoint) -> f64 {
    haversine_deg(a.lat, a.lon, b.lat, b.lon)
}

/// Haversine on raw degree pairs; callers are responsible for validity.
pub fn haversine_deg(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let dphi = (lat2 - lat1).abs().to_radians();
    let dlambda = (lon2 - lon1).abs().to_radians();
    let s_phi = (dphi / 2.0).sin();
    let s_lambda = (dlambda / 2.0).sin();
    let h = s_phi * s_phi + lat1.to_radians().cos() * lat2.to_radians().cos() * s_lambda * s_lambda;
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Axis-aligned latitude/longitude envelope.
///
/// Boxes spanning the antimeridian are not representable: `min_lon` must
/// not exceed `max_lon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl BBox {
    pub fn new(min_lat: f64, max_lat: f64, min_lon: f64, max_lon: f64) -> Result<Self, GeoError> {
        for lat in [min_lat, max_lat] {
            if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
                return Err(GeoError::InvalidLatitude(lat));
            }
        }
        for lon in [min_lon, max_lon] {
            if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
                return Err(GeoError::InvalidLongitude(lon));
            }
        }
        if min_lat > max_lat {
            return Err(GeoError::InvalidBBox { axis: "lat", min: min_lat, max: max_lat });
        }
        if min_lon > max_lon {
            return Err(GeoError::InvalidBBox { axis: "lon", min: min_lon, max: max_lon });
        }
        Ok(Self { min_lat, max_lat, min_lon, max_lon })
    }

    /// Re-checks the invariants of a deserialized box.
    pub fn validate(&self) -> Result<(), GeoError> {
        BBox::new(self.min_lat, self.max_lat, self.min_lon, self.max_lon).map(|_| ())
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        (self.min_lat..=self.max_lat).contains(&p.lat) && (self.min_lon..=self.max_lon).contains(&p.lon)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.min_lat + self.max_lat) / 2.0, (self.min_lon + self.max_lon) / 2.0)
    }

    /// The four corners as points with ids `sw`, `se`, `nw`, `ne`.
    pub fn corners(&self) -> [GeoPoint; 4] {
        let mk = |id: &str, lat: f64, lon: f64| GeoPoint::new(id, lat, lon).expect("bbox corners are valid");
        [
            mk("sw", self.min_lat, self.min_lon),
            mk("se", self.min_lat, self.max_lon),
            mk("nw", self.max_lat, self.min_lon),
            mk("ne", self.max_lat, self.max_lon),
        ]
    }
}

/// Tight envelope of a non-empty point set.
pub fn bounding_box(points: &[GeoPoint]) -> Result<BBox, GeoError> {
    let first = points.first().ok_or(GeoError::EmptyInput)?;
    let mut bbox = BBox { min_lat: first.lat, max_lat: first.lat, min_lon: first.lon, max_lon: first.lon };
    for p in &points[1..] {
        bbox.min_lat = bbox.min_lat.min(p.lat);
        bbox.max_lat = bbox.max_lat.max(p.lat);
        bbox.min_lon = bbox.min_lon.min(p.lon);
        bbox.max_lon = bbox.max_lon.max(p.lon);
    }
    Ok(bbox)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new("p", lat, lon).unwrap()
    }

    /// Spherical law of cosines, independent of the haversine path.
    fn cosine_law(a: &GeoPoint, b: &GeoPoint) -> f64 {
        let (p1, p2) = (a.lat().to_radians(), b.lat().to_radians());
        let dl = (b.lon() - a.lon()).to_radians();
        let c = (p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos()).clamp(-1.0, 1.0);
        EARTH_RADIUS_M * c.acos()
    }

    #[test]
    fn identity_is_zero() {
        assert_eq!(haversine_distance(&pt(0.0, 0.0), &pt(0.0, 0.0)), 0.0);
    }

    #[test]
    fn one_degree_on_equator() {
        let d = haversine_distance(&pt(0.0, 0.0), &pt(0.0, 1.0));
        let arc = EARTH_RADIUS_M * 1f64.to_radians();
        assert!((arc - 111_194.93).abs() < 0.01);
        assert!((d - arc).abs() < 0.01, "{d}");
        assert!((d - cosine_law(&pt(0.0, 0.0), &pt(0.0, 1.0))).abs() < 0.01);
    }

    #[test]
    fn quarter_great_circle() {
        let d = haversine_distance(&pt(0.0, 0.0), &pt(0.0, 90.0));
        assert!((d - std::f64::consts::PI * EARTH_RADIUS_M / 2.0).abs() < 1.0);
        assert!((d - 10_007_543.0).abs() < 1.0);
    }

    #[test]
    fn construction_validates_and_normalizes() {
        assert!(matches!(GeoPoint::new("a", 91.0, 0.0), Err(GeoError::InvalidLatitude(_))));
        assert!(matches!(GeoPoint::new("a", 0.0, -180.5), Err(GeoError::InvalidLongitude(_))));
        assert!(matches!(GeoPoint::new("a", f64::NAN, 0.0), Err(GeoError::InvalidLatitude(_))));
        assert_eq!(GeoPoint::new("a", 0.0, 180.0).unwrap().lon(), -180.0);
        let err = serde_json::from_str::<GeoPoint>(r#"{"id":"x","lat":120.0,"lon":0.0}"#);
        assert!(err.is_err());
    }

    #[test]
    fn bbox_examples() {
        assert!(matches!(bounding_box(&[]), Err(GeoError::EmptyInput)));
        let b = bounding_box(&[pt(1.0, 1.0)]).unwrap();
        assert_eq!((b.min_lat, b.max_lat, b.min_lon, b.max_lon), (1.0, 1.0, 1.0, 1.0));
        let b = bounding_box(&[pt(0.0, 0.0), pt(2.0, 3.0)]).unwrap();
        assert_eq!((b.min_lat, b.max_lat, b.min_lon, b.max_lon), (0.0, 2.0, 0.0, 3.0));
        assert!(matches!(BBox::new(0.0, 1.0, 170.0, -170.0), Err(GeoError::InvalidBBox { axis: "lon", .. })));
    }

    #[test]
    fn destination_round_trip() {
        let origin = pt(35.6586, 139.7454);
        for bearing in [0.0, 45.0, 133.0, 270.0] {
            let p = origin.destination("q", bearing, 40.0);
            assert!((haversine_distance(&origin, &p) - 40.0).abs() < 1e-6);
        }
    }

    fn arb_point() -> impl Strategy<Value = GeoPoint> {
        (-89.9f64..89.9, -179.9f64..179.9).prop_map(|(lat, lon)| GeoPoint::new("r", lat, lon).unwrap())
    }

    proptest! {
        #[test]
        fn symmetric(a in arb_point(), b in arb_point()) {
            prop_assert_eq!(haversine_distance(&a, &b), haversine_distance(&b, &a));
        }

        #[test]
        fn triangle_inequality(a in arb_point(), b in arb_point(), c in arb_point()) {
            let ab = haversine_distance(&a, &b);
            let bc = haversine_distance(&b, &c);
            let ac = haversine_distance(&a, &c);
            prop_assert!(ac <= (ab + bc) * (1.0 + 1e-6) + 1e-6);
        }

        #[test]
        fn bbox_contains_and_is_tight(points in proptest::collection::vec(arb_point(), 1..100)) {
            let b = bounding_box(&points).unwrap();
            prop_assert!(points.iter().all(|p| b.contains(p)));
            prop_assert!(points.iter().any(|p| p.lat() == b.min_lat));
            prop_assert!(points.iter().any(|p| p.lat() == b.max_lat));
            prop_assert!(points.iter().any(|p| p.lon() == b.min_lon));
            prop_assert!(points.iter().any(|p| p.lon() == b.max_lon));
            // idempotent over the corners
            prop_assert_eq!(bounding_box(&b.corners()).unwrap(), b);
        }
    }
}
