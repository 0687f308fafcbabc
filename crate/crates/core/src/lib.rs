//! Geospatial indicator prediction: spatial sampling, geographic retrieval,
//! two-stage prompting against a pluggable model gateway, bin-scaled answers,
//! shallow baselines, evaluation and prediction-bias analysis.

pub mod baselines;
pub mod bias;
pub mod binning;
pub mod evaluation;
pub mod geo;
pub mod prompt;
pub mod retrieval;
pub mod sampler;
pub mod seed;
pub mod task;

pub use binning::{fit_bin_scale, from_bin, to_bin, BinLabel, BinScale};
pub use geo::{bounding_box, haversine_distance, BBox, GeoPoint};
pub use sampler::{farthest_first_order, split_dataset, SampleOrder, Split, SplitConfig, SplitTag};
pub use task::IndicatorTask;
