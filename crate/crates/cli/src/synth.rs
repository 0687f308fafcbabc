//! Synthetic cities: deterministic points, ground-truth surfaces and a
//! complete set of provider fixtures, so the whole pipeline can run in
//! replay mode without any network access.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use serde_json::json;

use svllm_core::bias::{PoiCategory, PoiCounts};
use svllm_core::geo::{haversine_deg, BBox, GeoPoint};
use svllm_core::retrieval::transport::{FixtureStore, HttpResponse};
use svllm_core::retrieval::{nominatim, overpass, streetview, RetrievalConfig};
use svllm_core::seed::rng_for;
use svllm_core::IndicatorTask;

use crate::error::CliError;
use crate::io::write_jsonl;

pub const POINTS_SCHEMA: &str = "svllm.points";
pub const TRUTH_SCHEMA: &str = "svllm.truth";
pub const POI_SCHEMA: &str = "svllm.poi_expected";

pub const DEFAULT_BBOX: BBox = BBox { min_lat: 45.00, max_lat: 45.10, min_lon: 7.00, max_lon: 7.14 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruthFn {
    /// `base + (peak - base) * exp(-d² / 2σ²)`, `d` = distance to `center`
    /// (bbox centre when absent).
    GaussianBump {
        #[serde(default)]
        center: Option<[f64; 2]>,
        sigma_m: f64,
        peak: f64,
        base: f64,
    },
    /// Linear ramp from `low` to `high` along a compass bearing across the
    /// box.
    LinearGradient { bearing_deg: f64, low: f64, high: f64 },
    /// `cells × cells` alternating blocks.
    Checkerboard { cells: usize, low: f64, high: f64 },
}

impl TruthFn {
    pub fn default_for(task: IndicatorTask) -> Self {
        match task {
            IndicatorTask::Population => TruthFn::GaussianBump { center: None, sigma_m: 2500.0, peak: 25_000.0, base: 800.0 },
            IndicatorTask::Health => TruthFn::LinearGradient { bearing_deg: 45.0, low: 5.0, high: 60.0 },
            IndicatorTask::Ndvi => TruthFn::Checkerboard { cells: 4, low: 0.1, high: 0.7 },
            IndicatorTask::BuildingHeight => TruthFn::GaussianBump { center: None, sigma_m: 1800.0, peak: 80.0, base: 6.0 },
            IndicatorTask::Impervious => TruthFn::LinearGradient { bearing_deg: 200.0, low: 15.0, high: 95.0 },
        }
    }

    /// Spread of the surface, used to scale the additive noise.
    pub fn range(&self) -> f64 {
        match self {
            TruthFn::GaussianBump { peak, base, .. } => (peak - base).abs(),
            TruthFn::LinearGradient { low, high, .. } | TruthFn::Checkerboard { low, high, .. } => (high - low).abs(),
        }
    }

    pub fn eval(&self, bbox: &BBox, lat: f64, lon: f64) -> f64 {
        match self {
            TruthFn::GaussianBump { center, sigma_m, peak, base } => {
                let [clat, clon] = center.unwrap_or_else(|| {
                    let c = bbox.center();
                    [c.0, c.1]
                });
                let d = haversine_deg(clat, clon, lat, lon);
                base + (peak - base) * (-(d * d) / (2.0 * sigma_m * sigma_m)).exp()
            }
            TruthFn::LinearGradient { bearing_deg, low, high } => {
                let (s, c) = bearing_deg.to_radians().sin_cos();
                let mid_lat = ((bbox.min_lat + bbox.max_lat) / 2.0).to_radians();
                let project = |la: f64, lo: f64| (lo - bbox.min_lon) * mid_lat.cos() * s + (la - bbox.min_lat) * c;
                let corners = [
                    project(bbox.min_lat, bbox.min_lon),
                    project(bbox.min_lat, bbox.max_lon),
                    project(bbox.max_lat, bbox.min_lon),
                    project(bbox.max_lat, bbox.max_lon),
                ];
                let lo_p = corners.iter().copied().fold(f64::INFINITY, f64::min);
                let hi_p = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let t = ((project(lat, lon) - lo_p) / (hi_p - lo_p)).clamp(0.0, 1.0);
                low + (high - low) * t
            }
            TruthFn::Checkerboard { cells, low, high } => {
                let n = (*cells).max(1) as f64;
                let cell = |v: f64, a: f64, b: f64| (((v - a) / (b - a)) * n).floor().clamp(0.0, n - 1.0) as usize;
                let i = cell(lat, bbox.min_lat, bbox.max_lat);
                let j = cell(lon, bbox.min_lon, bbox.max_lon);
                if (i + j) % 2 == 0 {
                    *low
                } else {
                    *high
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthCitySpec {
    pub n_points: usize,
    /// Defaults to the pipeline bbox, then to a fixed 11 km box.
    pub bbox: Option<BBox>,
    /// Surface per task key; unlisted tasks use a built-in default.
    pub truths: IndexMap<String, TruthFn>,
    /// Gaussian noise sd as a fraction of each surface's range.
    pub noise_frac: f64,
    /// Expected POIs of each category within 500 m of a point.
    pub poi_intensity: IndexMap<String, f64>,
    pub places_per_point: usize,
    pub svi_missing_frac: f64,
    /// Points whose imagery is only found by a resampling probe.
    pub svi_jitter_frac: f64,
}

impl Default for SynthCitySpec {
    fn default() -> Self {
        let poi = [
            ("residential", 12.0),
            ("commercial_and_business_facilities", 8.0),
            ("industrial", 2.0),
            ("administration_and_public_services", 3.0),
            ("science_and_education", 2.0),
            ("green_space", 4.0),
            ("other", 5.0),
        ];
        Self {
            n_points: 500,
            bbox: None,
            truths: IndexMap::new(),
            noise_frac: 0.03,
            poi_intensity: poi.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            places_per_point: 14,
            svi_missing_frac: 0.1,
            svi_jitter_frac: 0.2,
        }
    }
}

impl SynthCitySpec {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(format!("invalid synth spec: {m}")));
        if self.n_points < 100 {
            return bad(format!("n_points must be >= 100, got {}", self.n_points));
        }
        for (name, f) in [("svi_missing_frac", self.svi_missing_frac), ("svi_jitter_frac", self.svi_jitter_frac)] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} must be in [0, 1], got {f}"));
            }
        }
        if self.svi_missing_frac + self.svi_jitter_frac > 1.0 {
            return bad("svi_missing_frac + svi_jitter_frac exceeds 1".into());
        }
        if !(self.noise_frac >= 0.0 && self.noise_frac.is_finite()) {
            return bad(format!("noise_frac must be >= 0, got {}", self.noise_frac));
        }
        for key in self.truths.keys() {
            key.parse::<IndicatorTask>().map_err(|e| CliError::Config(format!("invalid synth spec: {e}")))?;
        }
        for (key, v) in &self.poi_intensity {
            category(key)?;
            if !(*v >= 0.0 && v.is_finite()) {
                return bad(format!("poi intensity for {key} must be >= 0"));
            }
        }
        for f in self.truths.values() {
            match f {
                TruthFn::GaussianBump { sigma_m, .. } if sigma_m.is_nan() || *sigma_m <= 0.0 => return bad("sigma_m must be positive".into()),
                TruthFn::Checkerboard { cells: 0, .. } => return bad("checkerboard needs at least one cell".into()),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn truth_fn(&self, task: IndicatorTask) -> TruthFn {
        self.truths
            .iter()
            .find(|(k, _)| k.parse::<IndicatorTask>().ok() == Some(task))
            .map(|(_, f)| f.clone())
            .unwrap_or_else(|| TruthFn::default_for(task))
    }
}

fn category(key: &str) -> Result<PoiCategory, CliError> {
    let c: PoiCategory = serde_json::from_value(json!(key))
        .map_err(|_| CliError::Config(format!("invalid synth spec: unknown POI category {key:?}")))?;
    if c == PoiCategory::Total {
        return Err(CliError::Config("invalid synth spec: Total is derived, not placed".into()));
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub sample_id: String,
    pub values: BTreeMap<IndicatorTask, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiExpected {
    pub sample_id: String,
    pub counts: PoiCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub points: usize,
    pub fixtures: usize,
    pub svi_direct: usize,
    pub svi_jittered: usize,
    pub svi_missing: usize,
}

pub struct SynthOutputs<'a> {
    pub points: &'a Path,
    pub truth: &'a Path,
    pub poi_expected: &'a Path,
    pub fixtures_dir: &'a Path,
}

const ROADS: [&str; 12] =
    ["Maple", "Harbor", "Station", "Mill", "Orchard", "Canal", "Market", "Hill", "Bridge", "Chapel", "Willow", "Quarry"];
const ROAD_KINDS: [&str; 4] = ["Street", "Avenue", "Road", "Lane"];
const DISTRICTS: [&str; 9] =
    ["Northgate", "Eastbrook", "Southmere", "Westholm", "Old Quarter", "Riverside", "Highfield", "Lowmarsh", "Centre"];
const PLACE_ADJ: [&str; 10] = ["Golden", "Blue", "Corner", "Central", "Little", "Grand", "Royal", "Green", "Union", "Silver"];
const PLACE_KINDS: [(&str, &str, &str); 10] = [
    ("Bakery", "shop", "bakery"),
    ("Pharmacy", "amenity", "pharmacy"),
    ("Primary School", "amenity", "school"),
    ("Clinic", "amenity", "clinic"),
    ("Gardens", "leisure", "park"),
    ("Library", "amenity", "library"),
    ("Market Hall", "amenity", "marketplace"),
    ("Cafe", "amenity", "cafe"),
    ("Hotel", "tourism", "hotel"),
    ("Fire Station", "amenity", "fire_station"),
];

/// One tag that the bundled category mapping assigns to each category.
fn poi_tag(c: PoiCategory) -> (&'static str, &'static str) {
    match c {
        PoiCategory::Residential => ("building", "apartments"),
        PoiCategory::CommercialAndBusinessFacilities => ("shop", "convenience"),
        PoiCategory::Industrial => ("man_made", "works"),
        PoiCategory::AdministrationAndPublicServices => ("amenity", "townhall"),
        PoiCategory::ScienceAndEducation => ("amenity", "school"),
        PoiCategory::GreenSpace => ("leisure", "park"),
        PoiCategory::Other | PoiCategory::Total => ("highway", "bus_stop"),
    }
}

pub fn slug(city: &str) -> String {
    let s: String = city.to_ascii_lowercase().chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '-' }).collect();
    let s = s.trim_matches('-').to_string();
    if s.is_empty() {
        "city".into()
    } else {
        s
    }
}

fn node_json(id: i64, p: &GeoPoint, tags: &[(&str, String)]) -> serde_json::Value {
    let tags: serde_json::Map<String, serde_json::Value> = tags.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
    json!({"type": "node", "id": id, "lat": p.lat(), "lon": p.lon(), "tags": tags})
}

struct Writer<'a> {
    store: FixtureStore,
    cfg: &'a RetrievalConfig,
    count: usize,
}

impl Writer<'_> {
    fn save(&mut self, req: &svllm_core::retrieval::transport::HttpRequest, resp: HttpResponse) -> Result<(), CliError> {
        self.store.save(req, &resp).map_err(CliError::data)?;
        self.count += 1;
        Ok(())
    }

    fn json(&mut self, req: &svllm_core::retrieval::transport::HttpRequest, body: serde_json::Value) -> Result<(), CliError> {
        self.save(req, HttpResponse::json(200, serde_json::to_string(&body).expect("json")))
    }
}

/// Writes points, truths, expected POI counts and replay fixtures for every
/// provider request the retrieval stage will make under `rcfg`.
pub fn generate(
    spec: &SynthCitySpec,
    city: &str,
    bbox: BBox,
    tasks: &[IndicatorTask],
    seed: u64,
    rcfg: &RetrievalConfig,
    out: &SynthOutputs,
) -> Result<SynthSummary, CliError> {
    spec.validate()?;
    bbox.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let prefix = slug(city);
    let mut rng = rng_for(seed, &["synth-points", city]);
    let points: Vec<GeoPoint> = (0..spec.n_points)
        .map(|i| {
            let lat = rng.random_range(bbox.min_lat..bbox.max_lat);
            let lon = rng.random_range(bbox.min_lon..bbox.max_lon);
            GeoPoint::new(format!("{prefix}-{:04}", i + 1), lat, lon).expect("inside a valid bbox")
        })
        .collect();

    let mut truths = Vec::with_capacity(points.len());
    for p in &points {
        let mut values = BTreeMap::new();
        for &task in tasks {
            let f = spec.truth_fn(task);
            let sd = spec.noise_frac * f.range();
            let eps = if sd > 0.0 {
                Normal::new(0.0, sd).expect("sd > 0").sample(&mut rng_for(seed, &["synth-noise", &p.id, task.key()]))
            } else {
                0.0
            };
            values.insert(task, f.eval(&bbox, p.lat(), p.lon()) + eps);
        }
        truths.push(TruthRow { sample_id: p.id.clone(), values });
    }

    let mut w = Writer { store: FixtureStore::new(out.fixtures_dir), cfg: rcfg, count: 0 };
    let mut summary = SynthSummary { points: points.len(), ..Default::default() };
    let mut expected = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        address_fixture(&mut w, p, city, &bbox, seed)?;
        places_fixture(&mut w, p, i, spec, seed)?;
        expected.push(PoiExpected { sample_id: p.id.clone(), counts: poi_fixture(&mut w, p, i, spec, seed)? });
        match svi_fixtures(&mut w, p, spec, seed)? {
            SviOutcome::Direct => summary.svi_direct += 1,
            SviOutcome::Jittered => summary.svi_jittered += 1,
            SviOutcome::Missing => summary.svi_missing += 1,
        }
    }
    summary.fixtures = w.count;

    write_jsonl(out.points, POINTS_SCHEMA, &points)?;
    write_jsonl(out.truth, TRUTH_SCHEMA, &truths)?;
    write_jsonl(out.poi_expected, POI_SCHEMA, &expected)?;
    Ok(summary)
}

fn address_fixture(w: &mut Writer, p: &GeoPoint, city: &str, bbox: &BBox, seed: u64) -> Result<(), CliError> {
    let mut rng = rng_for(seed, &["synth-address", &p.id]);
    let third = |v: f64, a: f64, b: f64| (((v - a) / (b - a)) * 3.0).floor().clamp(0.0, 2.0) as usize;
    let district_ix = third(p.lat(), bbox.min_lat, bbox.max_lat) * 3 + third(p.lon(), bbox.min_lon, bbox.max_lon);
    let road = format!("{} {}", ROADS[rng.random_range(0..ROADS.len())], ROAD_KINDS[rng.random_range(0..ROAD_KINDS.len())]);
    let number = rng.random_range(1..400u32);
    let district = DISTRICTS[district_ix];
    let postcode = format!("{}{:02}", 10 + district_ix, rng.random_range(0..100u32));
    let body = json!({
        "place_id": rng.random_range(1_000_000..9_999_999u64),
        "lat": format!("{:.7}", p.lat()),
        "lon": format!("{:.7}", p.lon()),
        "display_name": format!("{number}, {road}, {district}, {city}, {postcode}"),
        "address": {
            "house_number": number.to_string(),
            "road": road,
            "suburb": district,
            "city": city,
            "postcode": postcode,
        },
    });
    w.json(&nominatim::geocode_request(p, w.cfg), body)
}

fn places_fixture(w: &mut Writer, p: &GeoPoint, i: usize, spec: &SynthCitySpec, seed: u64) -> Result<(), CliError> {
    let mut rng = rng_for(seed, &["synth-places", &p.id]);
    let max_d = w.cfg.places_radius_m.min(4000.0);
    let elements: Vec<serde_json::Value> = (0..spec.places_per_point)
        .map(|k| {
            let (kind, key, value) = PLACE_KINDS[rng.random_range(0..PLACE_KINDS.len())];
            let name = format!("{} {kind}", PLACE_ADJ[rng.random_range(0..PLACE_ADJ.len())]);
            let at = p.destination("place", rng.random_range(0.0..360.0), rng.random_range(20.0..max_d));
            node_json(((i + 1) * 1000 + k) as i64, &at, &[("name", name), (key, value.to_string())])
        })
        .collect();
    w.json(&overpass::places_request(p, w.cfg), json!({"version": 0.6, "elements": elements}))
}

fn poi_fixture(w: &mut Writer, p: &GeoPoint, i: usize, spec: &SynthCitySpec, seed: u64) -> Result<PoiCounts, CliError> {
    const RADIUS: f64 = svllm_core::bias::POI_RADIUS_M;
    let mut rng = rng_for(seed, &["synth-poi", &p.id]);
    let mut counts = PoiCounts::default();
    let mut elements = Vec::new();
    let mut next_id = 10_000_000 + (i as i64 + 1) * 1000;
    for (key, lambda) in &spec.poi_intensity {
        let cat = category(key)?;
        let n = if *lambda > 0.0 { Poisson::new(*lambda).expect("lambda > 0").sample(&mut rng) as usize } else { 0 };
        let (k, v) = poi_tag(cat);
        for _ in 0..n {
            // area-uniform inside the disc, clear of the boundary
            let d = (RADIUS - 5.0) * rng.random_range(0.0f64..1.0).sqrt();
            let at = p.destination("poi", rng.random_range(0.0..360.0), d);
            elements.push(node_json(next_id, &at, &[(k, v.to_string())]));
            next_id += 1;
            counts.add(cat);
        }
    }
    // decoys just outside the radius
    for _ in 0..rng.random_range(0..4) {
        let at = p.destination("poi", rng.random_range(0.0..360.0), rng.random_range(RADIUS + 10.0..RADIUS + 200.0));
        elements.push(node_json(next_id, &at, &[("leisure", "park".to_string())]));
        next_id += 1;
    }
    w.json(&overpass::poi_request(p, RADIUS, w.cfg), json!({"version": 0.6, "elements": elements}))?;
    Ok(counts)
}

enum SviOutcome {
    Direct,
    Jittered,
    Missing,
}

fn fake_jpeg(id: &str) -> Vec<u8> {
    let mut bytes = vec![0xFF, 0xD8, 0xFF, 0xE0];
    bytes.extend_from_slice(b"SYNTH:");
    bytes.extend_from_slice(id.as_bytes());
    bytes.extend_from_slice(&[0xFF, 0xD9]);
    bytes
}

fn svi_fixtures(w: &mut Writer, p: &GeoPoint, spec: &SynthCitySpec, seed: u64) -> Result<SviOutcome, CliError> {
    let cfg = w.cfg;
    let mut rng = rng_for(seed, &["synth-svi", &p.id]);
    let u: f64 = rng.random_range(0.0..1.0);
    let probes = streetview::jitter_probes(p, cfg.seed, cfg.resample_probes, cfg.svi_radius_m);
    let zero = json!({"status": "ZERO_RESULTS"});
    let hit = |w: &mut Writer, probe: &GeoPoint, capture: &GeoPoint, pano: String| -> Result<(), CliError> {
        let meta = json!({
            "status": "OK",
            "location": {"lat": capture.lat(), "lng": capture.lon()},
            "pano_id": pano,
            "date": "2023-06",
        });
        w.json(&streetview::metadata_request(probe, cfg), meta)?;
        let img = streetview::image_request(capture, Some(&pano), cfg);
        w.save(&img, HttpResponse::bytes(200, "image/jpeg", fake_jpeg(&pano)))
    };
    if u < spec.svi_missing_frac {
        for probe in std::iter::once(p).chain(&probes) {
            w.json(&streetview::metadata_request(probe, cfg), zero.clone())?;
        }
        Ok(SviOutcome::Missing)
    } else if u < spec.svi_missing_frac + spec.svi_jitter_frac && !probes.is_empty() {
        let j = rng.random_range(0..probes.len());
        for probe in std::iter::once(p).chain(&probes[..j]) {
            w.json(&streetview::metadata_request(probe, cfg), zero.clone())?;
        }
        hit(w, &probes[j], &probes[j], format!("synth-{}-j{j}", p.id))?;
        Ok(SviOutcome::Jittered)
    } else {
        let reach = (cfg.svi_radius_m * 0.5).min(12.0);
        let capture = p.destination(p.id.clone(), rng.random_range(0.0..360.0), rng.random_range(0.0..reach));
        hit(w, p, &capture, format!("synth-{}", p.id))?;
        Ok(SviOutcome::Direct)
    }
}
