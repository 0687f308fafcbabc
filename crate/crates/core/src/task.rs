//! The five tri-environmental prediction targets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorTask {
    Population,
    Health,
    Ndvi,
    BuildingHeight,
    Impervious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Social,
    Natural,
    Built,
}

impl IndicatorTask {
    pub const ALL: [IndicatorTask; 5] = [
        IndicatorTask::Population,
        IndicatorTask::Health,
        IndicatorTask::Ndvi,
        IndicatorTask::BuildingHeight,
        IndicatorTask::Impervious,
    ];

    pub fn key(self) -> &'static str {
        match self {
            IndicatorTask::Population => "population",
            IndicatorTask::Health => "health",
            IndicatorTask::Ndvi => "ndvi",
            IndicatorTask::BuildingHeight => "building_height",
            IndicatorTask::Impervious => "impervious",
        }
    }

    /// Short label used as the row header of comparison tables.
    pub fn table_label(self) -> &'static str {
        match self {
            IndicatorTask::Population => "Population",
            IndicatorTask::Health => "Health",
            IndicatorTask::Ndvi => "NDVI",
            IndicatorTask::BuildingHeight => "Building Height",
            IndicatorTask::Impervious => "Impervious Surface",
        }
    }

    /// Full indicator name, also used in the bias-correlation table.
    pub fn indicator_name(self) -> &'static str {
        match self {
            IndicatorTask::Population => "Population Density",
            IndicatorTask::Health => "Health",
            IndicatorTask::Ndvi => "NDVI",
            IndicatorTask::BuildingHeight => "Building Height",
            IndicatorTask::Impervious => "Impervious Surface",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            IndicatorTask::Population => "the number of residents per square kilometre",
            IndicatorTask::Health => "the travel time to the nearest healthcare facility (higher means worse access)",
            IndicatorTask::Ndvi => "the Normalized Difference Vegetation Index, a measure of vegetation health",
            IndicatorTask::BuildingHeight => "the average height of buildings",
            IndicatorTask::Impervious => "the share of ground sealed by roads and buildings",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            IndicatorTask::Population => "persons/km²",
            IndicatorTask::Health => "minutes",
            IndicatorTask::Ndvi => "index",
            IndicatorTask::BuildingHeight => "m",
            IndicatorTask::Impervious => "%",
        }
    }

    pub fn dimension(self) -> Dimension {
        match self {
            IndicatorTask::Population | IndicatorTask::Health => Dimension::Social,
            IndicatorTask::Ndvi => Dimension::Natural,
            IndicatorTask::BuildingHeight | IndicatorTask::Impervious => Dimension::Built,
        }
    }

    /// (dataset provider, reference year) of the ground-truth layer.
    pub fn provenance(self) -> (&'static str, u16) {
        match self {
            IndicatorTask::Population => ("WorldPop", 2020),
            IndicatorTask::Health => ("MAP", 2020),
            IndicatorTask::Ndvi => ("NASA LP DAAC at the USGS EROS Center", 2023),
            IndicatorTask::BuildingHeight => ("EC JRC", 2023),
            IndicatorTask::Impervious => ("EC JRC", 2023),
        }
    }
}

impl fmt::Display for IndicatorTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for IndicatorTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        match norm.as_str() {
            "population" | "population_density" => Ok(IndicatorTask::Population),
            "health" | "healthcare" | "accessibility_to_healthcare" => Ok(IndicatorTask::Health),
            "ndvi" => Ok(IndicatorTask::Ndvi),
            "building_height" | "height" => Ok(IndicatorTask::BuildingHeight),
            "impervious" | "impervious_surface" => Ok(IndicatorTask::Impervious),
            _ => Err(format!("unknown indicator task {s:?}")),
        }
    }
}
