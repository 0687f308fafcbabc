//! Correlation between local POI composition and signed prediction error.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::PredictionRecord;
use crate::geo::GeoPoint;
use crate::retrieval::overpass::OsmNode;
use crate::retrieval::{RetrievalError, Retriever};
use crate::task::IndicatorTask;

pub const POI_RADIUS_M: f64 = 500.0;
const DEFAULT_MAPPING: &str = include_str!("../../data/poi_categories.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoiCategory {
    Residential,
    CommercialAndBusinessFacilities,
    Industrial,
    AdministrationAndPublicServices,
    ScienceAndEducation,
    GreenSpace,
    Other,
    Total,
}

impl PoiCategory {
    pub const ALL: [PoiCategory; 8] = [
        PoiCategory::Residential,
        PoiCategory::CommercialAndBusinessFacilities,
        PoiCategory::Industrial,
        PoiCategory::AdministrationAndPublicServices,
        PoiCategory::ScienceAndEducation,
        PoiCategory::GreenSpace,
        PoiCategory::Other,
        PoiCategory::Total,
    ];

    pub const PARTS: [PoiCategory; 7] = [
        PoiCategory::Residential,
        PoiCategory::CommercialAndBusinessFacilities,
        PoiCategory::Industrial,
        PoiCategory::AdministrationAndPublicServices,
        PoiCategory::ScienceAndEducation,
        PoiCategory::GreenSpace,
        PoiCategory::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PoiCategory::Residential => "Residential",
            PoiCategory::CommercialAndBusinessFacilities => "Commercial and Business Facilities",
            PoiCategory::Industrial => "Industrial",
            PoiCategory::AdministrationAndPublicServices => "Administration and Public Services",
            PoiCategory::ScienceAndEducation => "Science and Education",
            PoiCategory::GreenSpace => "Green Space",
            PoiCategory::Other => "Other",
            PoiCategory::Total => "Total",
        }
    }
}

impl fmt::Display for PoiCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Error)]
pub enum BiasError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("zero variance")]
    ZeroVariance,
    #[error("invalid category mapping: {0}")]
    Mapping(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRule {
    pub category: PoiCategory,
    /// `key=value` or `key=*`.
    pub tags: Vec<String>,
}

/// Ordered tag rules; a node takes the category of the first rule with a
/// matching tag, and `Other` when none match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMapping {
    pub version: u32,
    pub rules: Vec<CategoryRule>,
}

impl Default for CategoryMapping {
    fn default() -> Self {
        Self::from_json(DEFAULT_MAPPING).expect("bundled mapping is valid")
    }
}

impl CategoryMapping {
    pub fn from_json(s: &str) -> Result<Self, BiasError> {
        let m: CategoryMapping = serde_json::from_str(s).map_err(|e| BiasError::Mapping(e.to_string()))?;
        for rule in &m.rules {
            if matches!(rule.category, PoiCategory::Total | PoiCategory::Other) {
                return Err(BiasError::Mapping(format!("{} cannot have tag rules", rule.category)));
            }
            if let Some(bad) = rule.tags.iter().find(|t| !t.contains('=')) {
                return Err(BiasError::Mapping(format!("tag pattern {bad:?} is not key=value")));
            }
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, BiasError> {
        let s = std::fs::read_to_string(path).map_err(|e| BiasError::Mapping(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn classify(&self, node: &OsmNode) -> PoiCategory {
        for rule in &self.rules {
            let hit = rule.tags.iter().any(|pattern| {
                let (k, v) = pattern.split_once('=').expect("validated pattern");
                node.tags.get(k).is_some_and(|have| v == "*" || have == v)
            });
            if hit {
                return rule.category;
            }
        }
        PoiCategory::Other
    }
}

/// Per-category POI counts; `Total` is always the sum of the others.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<PoiCategory, u64>", into = "BTreeMap<PoiCategory, u64>")]
pub struct PoiCounts {
    parts: [u64; 7],
}

impl PoiCounts {
    pub fn add(&mut self, category: PoiCategory) {
        let i = PoiCategory::PARTS.iter().position(|c| *c == category).expect("Total is derived, not counted");
        self.parts[i] += 1;
    }

    pub fn from_parts(parts: &[(PoiCategory, u64)]) -> Self {
        let mut c = Self::default();
        for (cat, n) in parts {
            let i = PoiCategory::PARTS.iter().position(|p| p == cat).expect("Total is derived, not counted");
            c.parts[i] += n;
        }
        c
    }

    pub fn get(&self, category: PoiCategory) -> u64 {
        match PoiCategory::PARTS.iter().position(|c| *c == category) {
            Some(i) => self.parts[i],
            None => self.parts.iter().sum(),
        }
    }
}

impl From<PoiCounts> for BTreeMap<PoiCategory, u64> {
    fn from(c: PoiCounts) -> Self {
        PoiCategory::ALL.iter().map(|cat| (*cat, c.get(*cat))).collect()
    }
}

impl TryFrom<BTreeMap<PoiCategory, u64>> for PoiCounts {
    type Error = String;

    fn try_from(m: BTreeMap<PoiCategory, u64>) -> Result<Self, Self::Error> {
        let parts: Vec<(PoiCategory, u64)> = m.iter().filter(|(k, _)| **k != PoiCategory::Total).map(|(k, v)| (*k, *v)).collect();
        let c = Self::from_parts(&parts);
        match m.get(&PoiCategory::Total) {
            Some(t) if *t != c.get(PoiCategory::Total) => Err(format!("Total {t} != sum of categories {}", c.get(PoiCategory::Total))),
            _ => Ok(c),
        }
    }
}

pub fn count_nodes(nodes: &[OsmNode], point: &GeoPoint, radius_m: f64, mapping: &CategoryMapping) -> PoiCounts {
    let mut counts = PoiCounts::default();
    for node in nodes.iter().filter(|n| n.distance_to(point) <= radius_m) {
        counts.add(mapping.classify(node));
    }
    counts
}

/// Counts tagged OSM nodes within `radius_m` of `point`, by category.
pub fn poi_counts(
    retriever: &Retriever,
    point: &GeoPoint,
    radius_m: f64,
    mapping: &CategoryMapping,
) -> Result<PoiCounts, BiasError> {
    let nodes = retriever.poi_nodes(point, radius_m)?;
    Ok(count_nodes(&nodes, point, radius_m, mapping))
}

/// Pearson product-moment correlation, clamped to [-1, 1].
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64, BiasError> {
    if x.len() != y.len() {
        return Err(BiasError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(BiasError::TooFew(x.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(BiasError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRecord {
    pub sample_id: String,
    pub city: String,
    pub task: IndicatorTask,
    /// Predicted minus actual, in bin units.
    pub bias: f64,
    pub poi_counts: PoiCounts,
}

impl BiasRecord {
    pub fn from_prediction(p: &PredictionRecord, poi_counts: PoiCounts) -> Self {
        Self { sample_id: p.sample_id.clone(), city: p.city.clone(), task: p.task, bias: p.bias(), poi_counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub city: String,
    pub task: IndicatorTask,
    pub category: PoiCategory,
    pub r: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    /// Every computed coefficient in (city, task, category) order.
    pub all: Vec<CorrelationRow>,
    pub positive: Vec<CorrelationRow>,
    pub negative: Vec<CorrelationRow>,
    pub notes: Vec<String>,
}

pub const TOP_N: usize = 10;

fn key(r: &CorrelationRow) -> (&str, IndicatorTask, PoiCategory) {
    (r.city.as_str(), r.task, r.category)
}

/// One coefficient per (city, task, category); the ten strongest positive
/// and negative values are ranked, ties in (city, task, category) order.
pub fn bias_correlation_table(records: &[BiasRecord]) -> BiasTable {
    let mut groups: BTreeMap<(String, IndicatorTask), Vec<&BiasRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.city.clone(), r.task)).or_default().push(r);
    }
    let mut table = BiasTable::default();
    for ((city, task), recs) in groups {
        let bias: Vec<f64> = recs.iter().map(|r| r.bias).collect();
        for category in PoiCategory::ALL {
            let counts: Vec<f64> = recs.iter().map(|r| r.poi_counts.get(category) as f64).collect();
            match pearson_r(&counts, &bias) {
                Ok(r) => table.all.push(CorrelationRow { city: city.clone(), task, category, r }),
                Err(e) => table.notes.push(format!("{city}/{}/{category}: skipped, {e}", task.indicator_name())),
            }
        }
    }
    let mut pos: Vec<CorrelationRow> = table.all.iter().filter(|r| r.r > 0.0).cloned().collect();
    pos.sort_by(|a, b| b.r.total_cmp(&a.r).then_with(|| key(a).cmp(&key(b))));
    pos.truncate(TOP_N);
    let mut neg: Vec<CorrelationRow> = table.all.iter().filter(|r| r.r < 0.0).cloned().collect();
    neg.sort_by(|a, b| a.r.total_cmp(&b.r).then_with(|| key(a).cmp(&key(b))));
    neg.truncate(TOP_N);
    table.positive = pos;
    table.negative = neg;
    table
}

fn csv_row(w: &mut csv::Writer<Vec<u8>>, r: &CorrelationRow) {
    w.write_record([r.city.as_str(), r.task.indicator_name(), r.category.label(), &format!("{:.4}", r.r)])
        .expect("in-memory write");
}

impl BiasTable {
    /// Positive section, a blank line, then the negative section.
    pub fn to_csv(&self) -> String {
        let section = |rows: &[CorrelationRow], header: bool| {
            let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
            if header {
                w.write_record(["City", "Metric", "POI Column", "Correlation with Difference"]).expect("in-memory write");
            }
            for r in rows {
                csv_row(&mut w, r);
            }
            String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
        };
        format!("{}\n{}", section(&self.positive, true), section(&self.negative, false))
    }

    /// (city, metric) rows by category columns, for heat-map plotting.
    pub fn matrix_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let mut header = vec!["City".to_string(), "Metric".to_string()];
        header.extend(PoiCategory::ALL.iter().map(|c| c.label().to_string()));
        w.write_record(&header).expect("in-memory write");
        let mut cells: BTreeMap<(&str, IndicatorTask), BTreeMap<PoiCategory, f64>> = BTreeMap::new();
        for r in &self.all {
            cells.entry((r.city.as_str(), r.task)).or_default().insert(r.category, r.r);
        }
        for ((city, task), by_cat) in cells {
            let mut line = vec![city.to_string(), task.indicator_name().to_string()];
            line.extend(PoiCategory::ALL.iter().map(|c| by_cat.get(c).map(|v| format!("{v:.4}")).unwrap_or_else(|| "NA".into())));
            w.write_record(&line).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}
